"""
Exposure model fit - maximum likelihood for theta3 from the surrogates alone
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from latentee.config import settings
from latentee.engines.model.data import Dataset
from latentee.engines.model.params import (
    ParamVector,
    transform_forward,
    transform_inverse,
    transform_jacobian,
)
from latentee.engines.model.spec import CovKind, ModelSpec
from latentee.engines.moments import ExposureModel, ExposureState
from latentee.engines.numdiff import central_gradient, central_jacobian
from latentee.engines.optimize import QuasiNewton
from latentee.errors import BadParam, LatentEEError, Unidentified

logger = logging.getLogger(__name__)


@dataclass
class ExposureFit:
    """Fitted exposure model"""
    spec: ModelSpec
    theta3_hat: np.ndarray
    loglik: float
    score_norm: float
    iterations: int
    converged: bool
    pattern_counts: Dict[str, int]
    covariance: Optional[np.ndarray] = None
    trace: List[float] = field(default_factory=list, repr=False)

    @property
    def names(self) -> List[str]:
        return self.spec.layout.theta3_names

    def state(self, dataset: Dataset) -> ExposureState:
        return ExposureModel(self.spec, self.theta3_hat).bind(dataset)


class _ExposureObjective:
    """-loglik / N on the unconstrained theta3 scale with a one-point state cache"""

    def __init__(self, spec: ModelSpec, dataset: Dataset):
        self.spec = spec
        self.dataset = dataset
        self.groups = spec.layout.theta3_groups()
        self._key = None
        self._state = None

    def state(self, u: np.ndarray) -> ExposureState:
        key = u.tobytes()
        if key != self._key:
            theta3 = transform_inverse(u, self.groups)
            self._state = ExposureModel(self.spec, theta3).bind(self.dataset)
            self._key = key
        return self._state

    def value(self, u: np.ndarray) -> float:
        return -float(self.state(u).loglik_i.sum()) / self.dataset.N

    def gradient(self, u: np.ndarray) -> np.ndarray:
        score = self.state(u).score_i.sum(axis=0) / self.dataset.N
        return -(transform_jacobian(u, self.groups).T @ score)


def obs_loglik_x(spec: ModelSpec, theta3: np.ndarray, dataset: Dataset,
                 per_subject: bool = False) -> Union[float, np.ndarray]:
    """
    Observed-data log-likelihood of the surrogates.

    Subjects without observed surrogates contribute 0.
    """
    loglik_i = ExposureModel(spec, theta3).bind(dataset).loglik_i
    return loglik_i if per_subject else float(loglik_i.sum())


def score_theta3(spec: ModelSpec, theta3: np.ndarray, dataset: Dataset,
                 per_subject: bool = False, gradient: Optional[str] = None) -> np.ndarray:
    """
    Gradient of obs_loglik_x with respect to constrained theta3.

    Args:
        spec: Model specification
        theta3: Constrained exposure parameters
        dataset: Subjects
        per_subject: Return the N x k3 contributions instead of their sum
        gradient: 'analytic' or 'numeric' (defaults to settings.gradient)
    """
    mode = gradient or settings.gradient
    theta3 = np.asarray(theta3, dtype=float)
    if mode == "analytic":
        score_i = ExposureModel(spec, theta3).bind(dataset).score_i
        return score_i if per_subject else score_i.sum(axis=0)

    groups = spec.layout.theta3_groups()
    u0 = transform_forward(theta3, groups)
    jac = transform_jacobian(u0, groups)
    if per_subject:
        fn = lambda u: obs_loglik_x(spec, transform_inverse(u, groups), dataset, per_subject=True)
        d_u = central_jacobian(fn, u0, settings.fd_step)
        return np.linalg.solve(jac.T, d_u.T).T
    fn = lambda u: obs_loglik_x(spec, transform_inverse(u, groups), dataset)
    return np.linalg.solve(jac.T, central_gradient(fn, u0, settings.fd_step))


def initial_theta3(spec: ModelSpec, dataset: Dataset) -> np.ndarray:
    """
    Moment-based starting values: latent intercepts from the scale-fixing
    surrogates, free loadings at 1, free intercepts from surrogate means,
    half of each surrogate variance to error and half to the latent.
    """
    layout = spec.layout
    X = dataset.X
    counts = np.sum(~np.isnan(X), axis=0)
    means = np.array([np.nanmean(X[:, j]) if counts[j] else 0.0 for j in range(spec.p)])
    variances = np.array([np.nanvar(X[:, j]) if counts[j] > 1 else 1.0 for j in range(spec.p)])
    variances = np.where(variances > 1e-8, variances, 1.0)

    lam = np.where(np.isnan(spec.lambda_pattern), 1.0, spec.lambda_pattern)
    nu_fixed = np.nan_to_num(spec.nu_pattern, nan=0.0)
    alpha = np.zeros(spec.l)
    psi_diag = np.ones(spec.l)
    for k in range(spec.l):
        col = spec.lambda_pattern[:, k]
        refs = [j for j in range(spec.p) if not np.isnan(col[j]) and col[j] != 0]
        ref = max(refs, key=lambda j: counts[j]) if refs else None
        if ref is not None:
            alpha[k] = (means[ref] - nu_fixed[ref]) / col[ref] if np.isnan(spec.alpha_pattern[k]) else 0.0
            psi_diag[k] = 0.5 * variances[ref] / col[ref] ** 2
    alpha = np.where(np.isnan(spec.alpha_pattern), alpha, spec.alpha_pattern)
    nu = means - lam @ alpha

    theta3 = []
    theta3 += [nu[i] for (i,) in layout.free["nu"]]
    theta3 += [1.0 for _ in layout.free["lam"]]
    theta3 += [0.0 for _ in layout.free["K"]]
    theta3 += [alpha[k] for (k,) in layout.free["alpha"]]
    theta3 += [0.0 for _ in layout.free["gamma1"]]
    theta3 += [0.0 for _ in layout.free["gamma2"]]

    delta = spec.delta_cov
    theta3 += [0.5 * variances[j] for j in delta.free_variances]
    theta3 += [0.0 for _ in delta.blocks]

    if spec.psi_cov.kind == CovKind.UNSTRUCTURED:
        psi = np.diag(psi_diag)
        theta3 += [psi[i, j] for i in range(spec.l) for j in range(i + 1)]
    else:
        theta3 += psi_diag.tolist()
    return np.array(theta3, dtype=float)


def information_check(hessian: np.ndarray, what: str, names: List[str]):
    """
    Raise Unidentified when the information matrix is numerically singular.

    Args:
        hessian: Mean negative-log-likelihood curvature (k x k)
        what: Fit description for the message
        names: Parameter names
    """
    sym = 0.5 * (hessian + hessian.T)
    eig, vec = np.linalg.eigh(sym)
    top = max(np.max(np.abs(eig)), np.finfo(float).tiny)
    ratio = np.min(np.abs(eig)) / top
    if ratio < settings.identifiability_tol:
        direction = vec[:, np.argmin(np.abs(eig))]
        involved = [names[k] for k in np.argsort(-np.abs(direction))[:3] if abs(direction[k]) > 1e-3]
        logger.error(f"{what}: information singular (relative eigenvalue {ratio:.2e}) along {involved}")
        raise Unidentified(
            f"{what} is not identified: information matrix singular along {involved}",
            relative_eigenvalue=ratio, parameters=involved,
        )


def fit_exposure_mle(spec: ModelSpec, dataset: Dataset,
                     init: Optional[Union[ParamVector, np.ndarray]] = None) -> ExposureFit:
    """
    Maximize the observed-data surrogate likelihood over theta3.

    Args:
        spec: Model specification
        dataset: Subjects
        init: Starting theta3 (ParamVector or array); moment-based when omitted

    Returns:
        ExposureFit

    Raises:
        NotConverged: optimizer failed (best iterate attached)
        Unidentified: information at the optimum is singular
    """
    if not np.any(dataset.M):
        raise BadParam("no subject has an observed surrogate")
    if isinstance(init, ParamVector):
        theta0 = np.array(init.theta3)
    elif init is not None:
        theta0 = np.asarray(init, dtype=float)
    else:
        theta0 = initial_theta3(spec, dataset)

    objective = _ExposureObjective(spec, dataset)
    logger.info(f"Fitting exposure model '{spec.name}': N={dataset.N}, k3={spec.layout.k3}, "
                f"patterns={len(dataset.patterns)}")
    driver = QuasiNewton(
        objective.value,
        objective.gradient if settings.gradient == "analytic" else None,
        label="exposure MLE",
    )
    u0 = transform_forward(theta0, objective.groups)
    try:
        result = driver.run(u0)
    except LatentEEError as e:
        best = getattr(e, "best", None)
        if best is not None:
            _check_identified(spec, dataset, transform_inverse(best.x, objective.groups))
        raise

    theta3 = transform_inverse(result.x, objective.groups)
    hessian = _check_identified(spec, dataset, theta3)
    state = ExposureModel(spec, theta3).bind(dataset)
    score_norm = float(np.linalg.norm(state.score_i.sum(axis=0)) / dataset.N)
    try:
        covariance = np.linalg.inv(hessian) / dataset.N
    except np.linalg.LinAlgError:
        covariance = None
    return ExposureFit(
        spec=spec,
        theta3_hat=theta3,
        loglik=float(state.loglik_i.sum()),
        score_norm=score_norm,
        iterations=result.iterations,
        converged=result.converged,
        pattern_counts=dataset.pattern_counts,
        covariance=covariance,
        trace=[-v * dataset.N for v in result.trace],
    )


def _check_identified(spec: ModelSpec, dataset: Dataset, theta3: np.ndarray) -> np.ndarray:
    """Mean observed information on the constrained scale; raises Unidentified if singular"""
    fn = lambda t: ExposureModel(spec, t).bind(dataset).score_i.mean(axis=0)
    try:
        hessian = -central_jacobian(fn, theta3, settings.jac_step)
    except LatentEEError:
        groups = spec.layout.theta3_groups()
        u = transform_forward(theta3, groups)
        jac = transform_jacobian(u, groups)
        g = lambda v: jac.T @ ExposureModel(spec, transform_inverse(v, groups)).bind(dataset).score_i.mean(axis=0)
        jac_inv = np.linalg.inv(jac)
        hessian = jac_inv.T @ -central_jacobian(g, u, settings.jac_step) @ jac_inv
    information_check(hessian, f"exposure model '{spec.name}'", spec.layout.theta3_names)
    return 0.5 * (hessian + hessian.T)
