"""
Joint maximum likelihood over (theta1, theta2, theta3)
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from latentee.config import settings
from latentee.engines.exposure import fit_exposure_mle, information_check
from latentee.engines.model.covariance import build_cov
from latentee.engines.model.data import Dataset
from latentee.engines.model.params import (
    ParamVector,
    from_unconstrained,
    transform_forward,
    transform_inverse,
    transform_jacobian,
    unpack_params,
)
from latentee.engines.model.spec import ModelSpec
from latentee.engines.moments import LOG_2PI, ExposureModel, ExposureState
from latentee.engines.numdiff import central_jacobian
from latentee.engines.optimize import QuasiNewton
from latentee.engines.outcome import OutcomeSystem, Scheme, fit_outcome_ee
from latentee.errors import NumericJacobianFailure

logger = logging.getLogger(__name__)


@dataclass
class JointFit:
    params: ParamVector
    loglik: float
    score_norm: float
    iterations: int
    converged: bool
    covariance: Optional[np.ndarray] = None
    trace: List[float] = field(default_factory=list, repr=False)


def _as_values(spec: ModelSpec, theta: Union[ParamVector, np.ndarray]) -> np.ndarray:
    return theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)


class JointLikelihood:
    """
    Per-subject joint log-likelihood and analytic score at one theta.
    """

    def __init__(self, spec: ModelSpec, dataset: Dataset, theta: Union[ParamVector, np.ndarray],
                 state: Optional[ExposureState] = None):
        self.spec = spec
        self.dataset = dataset
        self.params = unpack_params(spec, _as_values(spec, theta))
        self.state = state or ExposureModel(spec, self.params.theta3).bind(dataset)
        self.system = OutcomeSystem(spec, self.state, Scheme.rc())

    def outcome_loglik_i(self) -> np.ndarray:
        theta1, theta2 = self.params.theta1, self.params.theta2
        beta = self.params.beta
        out = np.zeros(self.dataset.N)
        for grp in self.dataset.outcome_groups:
            n = grp.n
            e = grp.Y - self.system.design(grp) @ theta1
            omega, _ = build_cov(self.spec.outcome_cov, theta2, n)
            V = omega + self.system._inflation(grp, beta) * np.ones((n, n))
            chol = cho_factor(V, lower=True)
            logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
            quad = np.sum(e * cho_solve(chol, e.T).T, axis=1)
            out[grp.index] = -0.5 * (n * LOG_2PI + logdet + quad)
        return out

    def loglik_i(self) -> np.ndarray:
        return self.state.loglik_i + self.outcome_loglik_i()

    def score_i(self) -> np.ndarray:
        """Per-subject gradient of the joint log-likelihood (N x k), constrained scale"""
        layout = self.spec.layout
        theta1, theta2 = self.params.theta1, self.params.theta2
        beta = self.params.beta
        s = len(self.spec.outcome_latents)
        sel = list(self.spec.outcome_latents)
        k1, k2 = layout.k1, layout.k2
        out = np.zeros((self.dataset.N, layout.size))
        out[:, layout.slice3] = self.state.score_i
        d_u, d_psi = self.state.eb_derivatives

        for grp in self.dataset.outcome_groups:
            n, idx = grp.n, grp.index
            D = self.system.design(grp)
            e = grp.Y - D @ theta1
            omega, derivs = build_cov(self.spec.outcome_cov, theta2, n)
            psi_sel = self.system.psi_sel(grp)
            V = omega + float(beta @ psi_sel @ beta) * np.ones((n, n))
            chol = cho_factor(V, lower=True)
            v_inv = cho_solve(chol, np.eye(n))
            Q = e @ v_inv
            q_sum = Q.sum(axis=1)
            ones_vinv_ones = float(v_inv.sum())

            def rank_one(a):
                # d loglik for dV = a 11'
                return 0.5 * a * (q_sum ** 2 - ones_vinv_ones)

            out[idx, :k1] = np.einsum("gnk,gn->gk", D, Q)
            grad_infl = 2.0 * psi_sel @ beta
            for j in range(s):
                out[idx, 1 + j] += rank_one(grad_infl[j])
            for k, d_k in enumerate(derivs):
                out[idx, k1 + k] = 0.5 * (np.sum((Q @ d_k) * Q, axis=1) - np.sum(v_inv * d_k))
            g = self.dataset.pattern_of[idx[0]]
            for k in range(layout.k3):
                d_mean = d_u[k, idx][:, sel] @ beta
                d_infl = float(beta @ d_psi[k, g][np.ix_(sel, sel)] @ beta)
                out[idx, layout.slice3.start + k] += q_sum * d_mean + rank_one(d_infl)
        return out


def joint_loglik(spec: ModelSpec, theta: Union[ParamVector, np.ndarray], dataset: Dataset,
                 per_subject: bool = False):
    """
    Joint log-likelihood: surrogate part plus outcome-given-surrogate part.
    """
    loglik_i = JointLikelihood(spec, dataset, theta).loglik_i()
    return loglik_i if per_subject else float(loglik_i.sum())


def score_full(spec: ModelSpec, theta: Union[ParamVector, np.ndarray], dataset: Dataset,
               per_subject: bool = False) -> np.ndarray:
    """
    Analytic score of the joint log-likelihood (constrained scale).
    """
    score_i = JointLikelihood(spec, dataset, theta).score_i()
    return score_i if per_subject else score_i.sum(axis=0)


def _nudge_boundary(spec: ModelSpec, values: np.ndarray) -> np.ndarray:
    """Move boundary values (zero shared variance) inside for the log transform"""
    values = values.copy()
    for offset, kind, size in spec.layout.groups:
        if kind == "nonneg" and values[offset] <= 0:
            values[offset] = 1e-3 * max(1.0, abs(values[offset - 1]))
    return values


def two_stage_start(spec: ModelSpec, dataset: Dataset) -> ParamVector:
    """Exposure MLE followed by regression calibration"""
    exposure = fit_exposure_mle(spec, dataset)
    outcome = fit_outcome_ee(spec, dataset, exposure.theta3_hat, Scheme.rc())
    return ParamVector(spec, outcome.theta1_hat, outcome.theta2_hat, exposure.theta3_hat)


def observed_information(spec: ModelSpec, dataset: Dataset, theta: np.ndarray) -> np.ndarray:
    """
    Mean observed information by central differences of the analytic score.

    Near a variance boundary the constrained-scale step can leave the
    admissible region; the Hessian is then taken on the unconstrained scale
    and mapped back through the transform Jacobian.
    """
    fn = lambda t: score_full(spec, t, dataset, per_subject=True).mean(axis=0)
    try:
        hessian = -central_jacobian(fn, theta, settings.jac_step)
    except NumericJacobianFailure as e:
        logger.debug(f"Constrained-scale information failed ({e.message}); using the unconstrained scale")
        groups = spec.layout.groups
        u = transform_forward(theta, groups)
        jac = transform_jacobian(u, groups)
        g = lambda v: jac.T @ fn(transform_inverse(v, groups))
        jac_inv = np.linalg.inv(jac)
        hessian = jac_inv.T @ -central_jacobian(g, u, settings.jac_step) @ jac_inv
    return 0.5 * (hessian + hessian.T)


def fit_joint_mle(spec: ModelSpec, dataset: Dataset,
                  init: Optional[ParamVector] = None) -> JointFit:
    """
    Maximize the joint likelihood.

    Args:
        spec: Model specification
        dataset: Subjects
        init: Starting values; the two-stage (exposure MLE then RC) fit when omitted

    Returns:
        JointFit with inverse observed information as covariance

    Raises:
        NotConverged: optimizer failed
        Unidentified: observed information singular at the optimum
    """
    start = init if init is not None else two_stage_start(spec, dataset)
    values0 = _nudge_boundary(spec, start.values)
    groups = spec.layout.groups
    N = dataset.N
    cache = {}

    def likelihood(u: np.ndarray) -> JointLikelihood:
        key = u.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = JointLikelihood(spec, dataset, from_unconstrained(spec, u))
        return cache[key]

    def value(u):
        return -float(likelihood(u).loglik_i().sum()) / N

    def gradient(u):
        score = likelihood(u).score_i().sum(axis=0) / N
        return -(transform_jacobian(u, groups).T @ score)

    logger.info(f"Fitting joint likelihood for '{spec.name}' ({spec.outcome_cov.kind.value}), "
                f"k={spec.layout.size}, N={N}")
    driver = QuasiNewton(value, gradient if settings.gradient == "analytic" else None, label="joint MLE")
    result = driver.run(transform_forward(values0, groups))

    params = from_unconstrained(spec, result.x)
    info = observed_information(spec, dataset, params.values)
    information_check(info, f"joint model '{spec.name}'", spec.layout.names)
    lik = JointLikelihood(spec, dataset, params)
    score = lik.score_i().sum(axis=0)
    try:
        covariance = np.linalg.inv(info) / N
    except np.linalg.LinAlgError:
        covariance = None
    return JointFit(
        params=params,
        loglik=float(lik.loglik_i().sum()),
        score_norm=float(np.linalg.norm(score) / N),
        iterations=result.iterations,
        converged=result.converged,
        covariance=covariance,
        trace=[-v * N for v in result.trace],
    )
