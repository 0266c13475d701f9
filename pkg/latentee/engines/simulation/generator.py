"""
Data generators for the simulation designs
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from latentee.engines.io.config import CovarianceConfig, LatentConfig, ModelConfig, OutcomeConfig, SurrogateConfig
from latentee.engines.model.covariance import build_cov
from latentee.engines.model.data import Dataset, SubjectData
from latentee.engines.model.params import ParamVector
from latentee.engines.model.spec import ModelSpec
from latentee.engines.moments import ExposureModel
from latentee.engines.simulation.schemas import MissingScenario, SimDesign
from latentee.errors import BadDesign, LatentEEError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimCell:
    """One point of a design grid"""
    index: int
    beta: float
    rho: float
    me_fraction: float
    missing: MissingScenario

    def as_dict(self) -> dict:
        return {"beta": self.beta, "rho": self.rho, "me_fraction": self.me_fraction,
                "missing": self.missing.value}


def raw_beta(design: SimDesign, beta: float) -> float:
    """Generating beta; a standardized beta is scaled by sd(outcome noise) / sd(U)"""
    if design.standardized:
        return beta * np.sqrt(design.outcome_noise) / np.sqrt(design.var_u)
    return beta


def design_cells(design: SimDesign) -> List[SimCell]:
    """Cartesian grid of (beta, rho, me_fraction, missing) in declaration order"""
    cells = []
    for beta in design.betas:
        for rho in design.rhos:
            for fraction in design.me_fractions:
                for scenario in design.missing:
                    cells.append(SimCell(len(cells), beta, rho, fraction, MissingScenario(scenario)))
    return cells


def design_config(design: SimDesign, structure: Optional[str] = None, me_fraction: float = 0.22) -> ModelConfig:
    """
    Model configuration fitted in a design: one latent, the first surrogate
    sets scale and origin, the others have free loadings and intercepts.
    """
    surrogates = [
        SurrogateConfig(
            name=f"x{j + 1}",
            loadings={"u": 1.0 if j == 0 else "free"},
            intercept=0.0 if j == 0 else "free",
            error_variance=0.0 if me_fraction == 0 else "free",
        )
        for j in range(design.p)
    ]
    return ModelConfig(
        name=f"sim-{design.kind.value}",
        description=f"{design.kind.value} design, seed {design.seed}",
        latents=[LatentConfig(name="u")],
        surrogates=surrogates,
        latent_covariance="diagonal",
        outcome=OutcomeConfig(
            latents=["u"],
            covariates=["time"],
            covariance=CovarianceConfig(structure=structure or design.fit_covs[0], occasions=design.occasions),
        ),
    )


def truth_spec(design: SimDesign, structure: str, me_fraction: float = 0.22) -> ModelSpec:
    return design_config(design, structure, me_fraction).to_spec()


def true_theta2(design: SimDesign, rho: float) -> np.ndarray:
    noise = design.outcome_noise
    if design.true_cov == "cs":
        return np.array([(1.0 - rho) * noise, rho * noise])
    if design.true_cov == "ar1":
        return np.array([noise, rho])
    profile = np.array(design.true_sd_profile or np.linspace(0.8, 1.2, design.occasions))
    sds = profile * np.sqrt(noise / np.mean(profile ** 2))
    return np.concatenate([sds, [rho]])


def true_params(design: SimDesign, cell: SimCell) -> ParamVector:
    """Generator parameters on the truth spec for one cell"""
    spec = truth_spec(design, design.true_cov, cell.me_fraction)
    lam = np.array(design.lambdas)
    f = cell.me_fraction
    theta3 = list(np.zeros(design.p - 1)) + list(lam[1:]) + [0.0]
    if f > 0:
        theta3 += list(f / (1.0 - f) * lam ** 2 * design.var_u)
    theta3 += [design.var_u]
    theta1 = [design.beta0, raw_beta(design, cell.beta), design.kappa]
    return ParamVector(spec, theta1, true_theta2(design, cell.rho), theta3)


def nested_masks(p: int) -> List[np.ndarray]:
    """Masks 'first k observed' for k = 1..p"""
    return [np.arange(p) < k for k in range(1, p + 1)]


def pattern_probabilities(params: ParamVector, scenario: MissingScenario) -> np.ndarray:
    """
    Probability of each nested pattern.

    The var-* scenarios weight each pattern by the conditional variance of U
    given its observed surrogates (or its inverse).
    """
    p = params.spec.p
    if scenario == MissingScenario.COMPLETE:
        probs = np.zeros(p)
        probs[-1] = 1.0
        return probs
    if scenario == MissingScenario.UNIFORM:
        return np.full(p, 1.0 / p)
    model = ExposureModel(params.spec, params.theta3)
    cond_var = np.array([np.trace(model.pattern(m).psi_tilde) for m in nested_masks(p)])
    weights = cond_var if scenario == MissingScenario.VAR_PROPORTIONAL else 1.0 / cond_var
    return weights / weights.sum()


def _occasion_covariates(names: Sequence[str], T: int, rng: np.random.Generator) -> np.ndarray:
    Z = np.empty((T, len(names)))
    for k, name in enumerate(names):
        if name == "time":
            Z[:, k] = np.arange(T) / max(T - 1, 1)
        else:
            Z[:, k] = rng.standard_normal(T)
    return Z


def simulate_dataset(params: ParamVector, n: int, occasions: int, rng: np.random.Generator,
                     probs: Optional[np.ndarray] = None, masks: Optional[List[np.ndarray]] = None) -> Dataset:
    """
    Draw a dataset from the full Gaussian model at `params`.

    Subject covariates are standard normal; an occasion covariate named
    'time' runs from 0 to 1, any other is standard normal. True U is kept
    on every subject.
    """
    spec = params.spec
    try:
        model = ExposureModel(spec, params.theta3)
        omega_eps, _ = build_cov(spec.outcome_cov, params.theta2, occasions)
    except LatentEEError as e:
        raise BadDesign(f"generator parameters are inadmissible: {e.message}")
    mats = model.mats
    W = rng.standard_normal((n, spec.r))
    xi = rng.multivariate_normal(np.zeros(spec.l), mats.psi, size=n, method="eigh")
    U = (mats.alpha + W @ mats.gamma2.T + xi) @ model.a_inv.T
    delta = rng.multivariate_normal(np.zeros(spec.p), mats.omega_delta, size=n, method="eigh")
    X = mats.nu + U @ mats.lam.T + W @ mats.K.T + delta
    eps = rng.multivariate_normal(np.zeros(occasions), omega_eps, size=n, method="eigh")

    masks = masks or [np.ones(spec.p, dtype=bool)]
    probs = np.ones(1) if probs is None else np.asarray(probs)
    which = rng.choice(len(masks), size=n, p=probs)

    beta = np.zeros(spec.l)
    beta[list(spec.outcome_latents)] = params.beta
    subjects = []
    width = len(str(n))
    for i in range(n):
        Z = _occasion_covariates(spec.occasion_covariates, occasions, rng)
        y = params.beta0 + U[i] @ beta + Z @ params.kappa + eps[i]
        subjects.append(SubjectData(
            id=f"s{i + 1:0{width}d}", x=X[i], mask=masks[which[i]], w=W[i], z=Z, y=y, u_true=U[i],
        ))
    return Dataset(spec, subjects)


def replicate_rng(design: SimDesign, cell_index: int, replicate_index: int) -> np.random.Generator:
    """Independent stream per (seed, cell, replicate)"""
    return np.random.default_rng(np.random.SeedSequence([design.seed, cell_index, replicate_index]))


def gen_dataset(design: SimDesign, replicate_index: int, cell: Optional[SimCell] = None) -> Dataset:
    """
    Dataset for one replicate of one design cell.

    Args:
        design: Study design
        replicate_index: Replicate number
        cell: Grid cell; the first cell of the design when omitted

    Raises:
        BadDesign: inconsistent design dimensions
    """
    cell = cell or design_cells(design)[0]
    params = true_params(design, cell)
    probs = pattern_probabilities(params, cell.missing)
    rng = replicate_rng(design, cell.index, replicate_index)
    return simulate_dataset(params, design.n, design.occasions, rng, probs, nested_masks(design.p))
