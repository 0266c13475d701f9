"""
Outcome estimating equations - theta1 and theta2 given the fitted exposure model

Three weighting schemes share one code path; they differ only in the beta
used to inflate the working covariance:
    EE1  current beta iterate
    EE2  fixed best-guess beta*
    RC   zero (weights reduce to the outcome error covariance)
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from latentee.config import settings
from latentee.engines.model.covariance import build_cov
from latentee.engines.model.data import Dataset, OutcomeGroup
from latentee.engines.model.spec import CovKind, CovStructure, LINEAR_KINDS, ModelSpec
from latentee.engines.moments import ExposureModel, ExposureState
from latentee.errors import BadParam, NotConverged, RankDeficient

logger = logging.getLogger(__name__)


class SchemeKind(str, Enum):
    EE1 = "ee1"
    EE2 = "ee2"
    RC = "rc"


@dataclass(frozen=True)
class Scheme:
    """Working-covariance scheme; beta_star is only read by EE2"""
    kind: SchemeKind
    beta_star: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind(self.kind))
        if self.kind == SchemeKind.EE2 and self.beta_star is None:
            raise BadParam("EE2 requires a fixed beta*")
        if self.beta_star is not None:
            object.__setattr__(self, "beta_star", tuple(float(b) for b in self.beta_star))

    @classmethod
    def ee1(cls) -> "Scheme":
        return cls(SchemeKind.EE1)

    @classmethod
    def ee2(cls, beta_star: Sequence[float]) -> "Scheme":
        return cls(SchemeKind.EE2, tuple(beta_star))

    @classmethod
    def rc(cls) -> "Scheme":
        return cls(SchemeKind.RC)

    @property
    def label(self) -> str:
        if self.kind == SchemeKind.EE2:
            return f"ee2({','.join(f'{b:g}' for b in self.beta_star)})"
        return self.kind.value

    def weight_beta(self, beta_current: np.ndarray) -> np.ndarray:
        """beta entering the working covariance"""
        beta_current = np.asarray(beta_current, dtype=float)
        if self.kind == SchemeKind.EE1:
            return beta_current
        if self.kind == SchemeKind.RC:
            return np.zeros_like(beta_current)
        star = np.asarray(self.beta_star, dtype=float)
        if star.shape != beta_current.shape:
            raise BadParam(f"beta* has {star.size} entries but the model has {beta_current.size} outcome latents")
        return star


@dataclass
class OutcomeFit:
    """theta1/theta2 solution of the estimating equations"""
    spec: ModelSpec
    scheme: Scheme
    theta1_hat: np.ndarray
    theta2_hat: np.ndarray
    theta3_hat: np.ndarray
    ee_norm: float
    iterations: int
    converged: bool
    weight_inflation: Dict[str, float] = field(default_factory=dict)
    trace: List[np.ndarray] = field(default_factory=list, repr=False)


def working_cov(spec: ModelSpec, scheme: Scheme, theta2: np.ndarray, beta: np.ndarray,
                psi_tilde: np.ndarray, n_i: int) -> np.ndarray:
    """
    Working covariance R_{y|x} for one subject.

    Args:
        spec: Model specification
        scheme: Weighting scheme
        theta2: Outcome covariance parameters
        beta: Current beta (EE1) or anything (ignored by EE2 and RC)
        psi_tilde: Pattern-conditional latent covariance (l x l)
        n_i: Number of occasions
    """
    omega_eps, _ = build_cov(spec.outcome_cov, theta2, n_i)
    b = scheme.weight_beta(beta)
    sel = list(spec.outcome_latents)
    inflation = float(b @ psi_tilde[np.ix_(sel, sel)] @ b)
    return omega_eps + inflation * np.ones((n_i, n_i))


class OutcomeSystem:
    """
    Grouped evaluation of the theta1/theta2 estimating functions.

    Args:
        spec: Model specification
        state: Exposure quantities at the fitted theta3
        scheme: Weighting scheme
    """

    def __init__(self, spec: ModelSpec, state: ExposureState, scheme: Scheme):
        self.spec = spec
        self.state = state
        self.scheme = scheme
        self.dataset = state.dataset
        self.sel = list(spec.outcome_latents)
        self.k1 = spec.layout.k1
        self.k2 = spec.layout.k2

    def design(self, grp: OutcomeGroup) -> np.ndarray:
        """Per-subject design (1, U~_sel, Z) stacked as g x n x k1"""
        g, n = grp.index.size, grp.n
        u = self.state.u_tilde[np.ix_(grp.index, self.sel)]
        D = np.empty((g, n, self.k1))
        D[:, :, 0] = 1.0
        D[:, :, 1:1 + len(self.sel)] = u[:, None, :]
        D[:, :, 1 + len(self.sel):] = grp.Z
        return D

    def psi_sel(self, grp: OutcomeGroup) -> np.ndarray:
        p = self.state.psi_tilde[self.dataset.pattern_of[grp.index[0]]]
        return p[np.ix_(self.sel, self.sel)]

    def _inflation(self, grp: OutcomeGroup, beta: np.ndarray) -> float:
        return float(beta @ self.psi_sel(grp) @ beta)

    def weight(self, grp: OutcomeGroup, beta_w: np.ndarray, theta2_w: np.ndarray):
        omega, _ = build_cov(self.spec.outcome_cov, theta2_w, grp.n)
        R = omega + self._inflation(grp, beta_w) * np.ones((grp.n, grp.n))
        return cho_factor(R, lower=True)

    def contributions(self, theta1: np.ndarray, theta2: np.ndarray,
                      beta_w: Optional[np.ndarray] = None,
                      theta2_w: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Per-subject estimating functions (N x (k1 + k2)).

        Weights default to the scheme's own: EE1 uses theta1's beta,
        EE2/RC use beta* / zero; theta2_w defaults to theta2.
        """
        theta1 = np.asarray(theta1, dtype=float)
        theta2 = np.asarray(theta2, dtype=float)
        beta = theta1[1:1 + len(self.sel)]
        if beta_w is None:
            beta_w = self.scheme.weight_beta(beta)
        if theta2_w is None:
            theta2_w = theta2
        out = np.zeros((self.dataset.N, self.k1 + self.k2))
        for grp in self.dataset.outcome_groups:
            n = grp.n
            D = self.design(grp)
            e = grp.Y - D @ theta1
            chol = self.weight(grp, beta_w, theta2_w)
            r_inv = cho_solve(chol, np.eye(n))
            P = e @ r_inv
            out[grp.index, :self.k1] = np.einsum("gnk,gn->gk", D, P)
            omega, derivs = build_cov(self.spec.outcome_cov, theta2, n)
            V = omega + self._inflation(grp, beta) * np.ones((n, n))
            for k, d_k in enumerate(derivs):
                m_k = r_inv @ d_k @ r_inv
                out[grp.index, self.k1 + k] = 0.5 * (np.sum((P @ d_k) * P, axis=1) - np.sum(m_k * V))
        return out

    def stacked_norm(self, theta1: np.ndarray, theta2: np.ndarray) -> float:
        """Norm of the mean estimating function; equations of boundary-pinned slots are left out"""
        total = self.contributions(theta1, theta2).sum(axis=0)
        active = np.concatenate([np.ones(self.k1, dtype=bool), ~pinned_slots(self.spec.outcome_cov, theta2)])
        return float(np.linalg.norm(total[active]) / self.dataset.N)

    def gls(self, beta_w: Optional[np.ndarray], theta2_w: Optional[np.ndarray]) -> np.ndarray:
        """Generalized least squares for theta1 with fixed weights; identity weights when theta2_w is None"""
        info = np.zeros((self.k1, self.k1))
        rhs = np.zeros(self.k1)
        for grp in self.dataset.outcome_groups:
            D = self.design(grp)
            if theta2_w is None:
                r_inv = np.eye(grp.n)
            else:
                r_inv = cho_solve(self.weight(grp, beta_w, theta2_w), np.eye(grp.n))
            RD = np.einsum("nm,gmk->gnk", r_inv, D)
            info += np.einsum("gnk,gnj->kj", D, RD)
            rhs += np.einsum("gnk,gn->k", RD, grp.Y)
        eig, vec = np.linalg.eigh(info)
        if eig[-1] <= 0 or eig[0] / eig[-1] < settings.rcond_min:
            names = self.spec.layout.theta1_names
            null = vec[:, 0]
            combo = {names[k]: round(float(null[k]), 4) for k in range(self.k1) if abs(null[k]) > 1e-6}
            logger.error(f"Outcome design is rank deficient: {combo}")
            raise RankDeficient(f"outcome design (1, U~, Z) is rank deficient along {combo}", combination=combo)
        return np.linalg.solve(info, rhs)


def pinned_slots(structure: CovStructure, theta2: np.ndarray) -> np.ndarray:
    """Shared-variance slots sitting on the zero boundary"""
    kinds = [kind for kind, size in structure.transforms() for _ in range(size)]
    theta2 = np.asarray(theta2, dtype=float)
    return np.array([kind == "nonneg" and theta2[k] <= 0 for k, kind in enumerate(kinds)], dtype=bool)


def _pin_nonnegative(structure: CovStructure, F: np.ndarray, b: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Re-solve the linear trace equations with negative shared variances pinned at 0"""
    kinds = [kind for kind, size in structure.transforms() for _ in range(size)]
    pinned = [k for k, kind in enumerate(kinds) if kind == "nonneg" and theta[k] < 0]
    if not pinned:
        return theta
    keep = [k for k in range(len(theta)) if k not in pinned]
    out = np.zeros_like(theta)
    out[keep] = np.linalg.solve(F[np.ix_(keep, keep)], b[keep])
    logger.warning(f"Shared variance estimate negative; projected to the boundary (slots {pinned})")
    return out


def _admissible(structure: CovStructure, theta: np.ndarray) -> bool:
    try:
        build_cov(structure, theta, structure.dim or 2)
        return True
    except BadParam:
        return False


def solve_theta1(system: OutcomeSystem, theta2: np.ndarray, beta_ctx: np.ndarray) -> np.ndarray:
    """
    Exact GLS solution of the theta1 equations with weights held fixed.

    Args:
        system: Grouped outcome system
        theta2: Outcome covariance parameters in the weights
        beta_ctx: Current beta (read only by EE1)

    Raises:
        RankDeficient: the design (1, U~, Z) lacks full column rank
    """
    return system.gls(system.scheme.weight_beta(beta_ctx), np.asarray(theta2, dtype=float))


def solve_theta2(system: OutcomeSystem, theta1: np.ndarray, beta_ctx: np.ndarray,
                 theta2_start: np.ndarray) -> np.ndarray:
    """
    Solve the stacked trace equations for theta2 with R fixed at theta2_start.

    Linear structures are solved directly; others by Fisher scoring with
    step halving back into the admissible region.

    Raises:
        NotConverged: scoring iteration cap reached
        BadParam: no admissible step after the halving cap
    """
    spec = system.spec
    structure = spec.outcome_cov
    theta1 = np.asarray(theta1, dtype=float)
    start = np.asarray(theta2_start, dtype=float)
    beta_w = system.scheme.weight_beta(theta1[1:1 + len(system.sel)])
    beta = theta1[1:1 + len(system.sel)]
    N = system.dataset.N

    groups = []
    for grp in system.dataset.outcome_groups:
        D = system.design(grp)
        e = grp.Y - D @ theta1
        r_inv = cho_solve(system.weight(grp, beta_w, start), np.eye(grp.n))
        groups.append((grp, e @ r_inv, r_inv))

    def scoring_terms(theta2):
        k2 = len(theta2)
        F = np.zeros((k2, k2))
        s = np.zeros(k2)
        b = np.zeros(k2)
        for grp, P, r_inv in groups:
            n, g = grp.n, grp.index.size
            omega, derivs = build_cov(structure, theta2, n)
            c = system._inflation(grp, beta)
            ones = np.ones((n, n))
            V = omega + c * ones
            Ms = [r_inv @ d @ r_inv for d in derivs]
            for k, d_k in enumerate(derivs):
                quad = np.sum((P @ d_k) * P)
                s[k] += 0.5 * (quad - g * np.sum(Ms[k] * V))
                b[k] += 0.5 * (quad - g * c * np.sum(Ms[k]))
                for m in range(k2):
                    F[k, m] += 0.5 * g * np.sum(Ms[k] * derivs[m])
        return F, s, b

    if structure.kind in LINEAR_KINDS:
        F, _, b = scoring_terms(start)
        theta = np.linalg.solve(F, b)
        theta = _pin_nonnegative(structure, F, b, theta)
        if _admissible(structure, theta):
            return theta
        # step back toward the admissible start
        step = theta - start
        for _ in range(settings.max_halvings):
            step *= 0.5
            if _admissible(structure, start + step):
                logger.warning("Direct theta2 solution inadmissible; returned a shortened step")
                return start + step
        raise BadParam(f"theta2 solution left the admissible region after {settings.max_halvings} halvings")

    theta = start.copy()
    for it in range(settings.theta2_max_iter):
        F, s, _ = scoring_terms(theta)
        if np.max(np.abs(s)) / N < settings.theta2_tol:
            return theta
        step = np.linalg.solve(F, s)
        for _ in range(settings.max_halvings):
            if _admissible(structure, theta + step):
                break
            step *= 0.5
        else:
            raise BadParam(f"theta2 scoring step inadmissible after {settings.max_halvings} halvings")
        theta = theta + step
        logger.debug(f"theta2 scoring iteration {it + 1}: |s|/N={np.max(np.abs(s)) / N:.3e}")
    raise NotConverged(f"theta2 scoring did not converge in {settings.theta2_max_iter} iterations",
                       best=theta)


def initial_theta2(structure: CovStructure, variance: float) -> np.ndarray:
    """Admissible start splitting a total residual variance over the structure"""
    v = max(float(variance), 1e-6)
    d = structure.dim or 0
    kind = structure.kind
    if kind == CovKind.INDEPENDENCE:
        return np.array([v])
    if kind == CovKind.CS:
        return np.array([0.5 * v, 0.5 * v])
    if kind == CovKind.AR1:
        return np.array([v, 0.0])
    if kind == CovKind.DIAGONAL:
        return np.full(d, v)
    if kind in (CovKind.CSH, CovKind.HAR1):
        return np.concatenate([np.full(d, np.sqrt(v)), [0.0]])
    if kind == CovKind.UNSTRUCTURED:
        m = np.eye(d) * v
        return np.array([m[i, j] for i in range(d) for j in range(i + 1)])
    raise BadParam(f"'{kind.value}' is not an outcome covariance structure")


def _residual_variance(system: OutcomeSystem, theta1: np.ndarray) -> float:
    total, count = 0.0, 0
    for grp in system.dataset.outcome_groups:
        e = grp.Y - system.design(grp) @ theta1
        total += float(np.sum(e ** 2))
        count += e.size
    return total / max(count, 1)


def fit_outcome_ee(spec: ModelSpec, dataset: Dataset, theta3_hat: np.ndarray, scheme: Scheme,
                   init: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> OutcomeFit:
    """
    Solve the outcome estimating equations given the fitted exposure model.

    Alternates GLS for theta1 with the trace equations for theta2. EE1
    refreshes beta in the weights once per outer iteration and halves the
    step whenever the stacked norm increases.

    Args:
        spec: Model specification
        dataset: Subjects
        theta3_hat: Fitted exposure parameters
        scheme: Weighting scheme
        init: Optional (theta1, theta2) start

    Returns:
        OutcomeFit

    Raises:
        NotConverged: outer iteration cap reached (trace attached)
    """
    if not dataset.outcome_groups:
        raise BadParam("no subject has outcome measurements")
    state = ExposureModel(spec, theta3_hat).bind(dataset)
    system = OutcomeSystem(spec, state, scheme)
    structure = spec.outcome_cov
    s = len(spec.outcome_latents)

    if init is not None:
        theta1, theta2 = (np.asarray(v, dtype=float) for v in init)
    else:
        theta1 = system.gls(None, None)
        theta2 = initial_theta2(structure, _residual_variance(system, theta1))

    logger.info(f"Solving outcome equations ({scheme.label}, {structure.kind.value}) for N={dataset.N}")
    damp = scheme.kind == SchemeKind.EE1
    prev_norm = np.inf
    trace = []
    norm = np.inf
    for it in range(1, settings.ee_max_outer + 1):
        new1 = solve_theta1(system, theta2, theta1[1:1 + s])
        new2 = solve_theta2(system, new1, new1[1:1 + s], theta2)
        norm = system.stacked_norm(new1, new2)
        if damp and norm > prev_norm:
            half1 = theta1 + settings.ee1_damping * (new1 - theta1)
            half2 = theta2 + settings.ee1_damping * (new2 - theta2)
            if _admissible(structure, half2):
                logger.warning(f"EE1 iteration {it}: stacked norm increased ({prev_norm:.3e} -> {norm:.3e}); damping")
                new1, new2 = half1, half2
                norm = system.stacked_norm(new1, new2)
        change = max(np.max(np.abs(new1 - theta1)), np.max(np.abs(new2 - theta2), initial=0.0))
        scale = max(1.0, np.max(np.abs(np.concatenate([new1, new2]))))
        theta1, theta2 = new1, new2
        prev_norm = norm
        trace.append(np.concatenate([theta1, theta2]))
        logger.debug(f"outer iteration {it}: stacked norm {norm:.3e}, change {change:.3e}")
        if norm < settings.ee_tol and change < settings.ee_tol * scale:
            break
    else:
        logger.error(f"Outcome equations ({scheme.label}) did not converge: stacked norm {norm:.3e}")
        raise NotConverged(
            f"outcome estimating equations ({scheme.label}) did not converge in {settings.ee_max_outer} iterations",
            best=(theta1, theta2), trace=trace, ee_norm=norm,
        )

    beta_w = scheme.weight_beta(theta1[1:1 + s])
    inflation = {}
    for grp in dataset.outcome_groups:
        inflation[grp.pattern.label] = system._inflation(grp, beta_w)
    logger.info(f"Outcome equations ({scheme.label}) converged in {it} iterations; beta={theta1[1:1 + s]}")
    return OutcomeFit(
        spec=spec, scheme=scheme, theta1_hat=theta1, theta2_hat=theta2,
        theta3_hat=np.asarray(theta3_hat, dtype=float), ee_norm=norm, iterations=it,
        converged=True, weight_inflation=inflation, trace=trace,
    )
