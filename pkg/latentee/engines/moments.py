"""
Gaussian moments of the latent exposure model.

Marginal moments of U and X given covariates, empirical Bayes scores for
each surrogate missingness pattern, the conditional outcome moments, and the
directional derivatives of all of these along each theta3 slot.
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from latentee.config import settings
from latentee.engines.model.covariance import build_cov
from latentee.engines.model.data import Dataset
from latentee.engines.model.params import ExposureMatrices, ParamVector
from latentee.engines.model.spec import ModelSpec
from latentee.errors import Singular

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class MomentSet:
    """Marginal and pattern-conditional moments for one subject"""
    mu_u: np.ndarray
    psi_u: np.ndarray
    mu_x: np.ndarray
    omega_x: np.ndarray
    u_tilde: np.ndarray
    psi_tilde: np.ndarray
    mu_y_given_x: np.ndarray
    omega_y_given_x: np.ndarray


@dataclass(frozen=True)
class PatternMoments:
    """Factorized observed sub-block of the surrogate covariance for one mask"""
    mask: np.ndarray
    observed: np.ndarray
    chol: Optional[Tuple[np.ndarray, bool]]
    logdet: float
    cross: np.ndarray   # psi_u lambda_o' (l x m)
    gain: np.ndarray    # cross S^-1 (l x m)
    psi_tilde: np.ndarray

    @property
    def m(self) -> int:
        return int(self.observed.size)

    @cached_property
    def s_inv(self) -> np.ndarray:
        return cho_solve(self.chol, np.eye(self.m))


@dataclass
class DirectionMoments:
    """Derivatives of the marginal moments along one theta3 slot"""
    d_mu_u: np.ndarray
    d_psi_u: np.ndarray
    d_mu_x: np.ndarray
    d_omega_x: np.ndarray
    d_lam: Optional[np.ndarray]


class ExposureModel:
    """
    Exposure-model moments at a fixed theta3.

    Pattern factorizations are memoized by mask; the cache only ever stores
    what a fresh computation would return.
    """

    def __init__(self, spec: ModelSpec, theta3: np.ndarray):
        self.spec = spec
        self.theta3 = np.asarray(theta3, dtype=float)
        self.mats = ExposureMatrices.from_theta3(spec, self.theta3)
        resolvent = np.eye(spec.l) - self.mats.gamma1
        cond = np.linalg.cond(resolvent)
        if not np.isfinite(cond) or cond > settings.resolvent_cond_max:
            raise Singular(f"I - gamma1 is numerically singular (condition number {cond:.3g})", condition=cond)
        self.a_inv = np.linalg.inv(resolvent)
        self.psi_u = _sym(self.a_inv @ self.mats.psi @ self.a_inv.T)
        lam = self.mats.lam
        self.omega_x = _sym(lam @ self.psi_u @ lam.T + self.mats.omega_delta)
        self._patterns: Dict[bytes, PatternMoments] = {}

    def mu_u(self, W: np.ndarray) -> np.ndarray:
        """Rows of (I - gamma1)^-1 (alpha + gamma2 w)"""
        W = np.atleast_2d(W)
        base = self.mats.alpha + W @ self.mats.gamma2.T
        return base @ self.a_inv.T

    def mu_x(self, W: np.ndarray, mu_u: Optional[np.ndarray] = None) -> np.ndarray:
        W = np.atleast_2d(W)
        if mu_u is None:
            mu_u = self.mu_u(W)
        return self.mats.nu + mu_u @ self.mats.lam.T + W @ self.mats.K.T

    def pattern(self, mask: np.ndarray) -> PatternMoments:
        mask = np.asarray(mask, dtype=bool)
        key = mask.tobytes()
        cached = self._patterns.get(key)
        if cached is not None:
            return cached
        observed = np.flatnonzero(mask)
        l = self.spec.l
        if observed.size == 0:
            pm = PatternMoments(mask, observed, None, 0.0, np.zeros((l, 0)), np.zeros((l, 0)), self.psi_u)
        else:
            S = self.omega_x[np.ix_(observed, observed)]
            eig = np.linalg.eigvalsh(S)
            if eig[0] <= 0 or eig[0] / eig[-1] < settings.rcond_min:
                raise Singular(
                    f"surrogate covariance for pattern {''.join('1' if b else '0' for b in mask)} is singular",
                    min_eigenvalue=float(eig[0]),
                )
            chol = cho_factor(S, lower=True)
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
            cross = self.psi_u @ self.mats.lam[observed].T
            gain = cho_solve(chol, cross.T).T
            psi_tilde = _sym(self.psi_u - gain @ cross.T)
            pm = PatternMoments(mask, observed, chol, logdet, cross, gain, psi_tilde)
        self._patterns[key] = pm
        return pm

    def eb_scores(self, x: np.ndarray, mask: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Conditional mean and variance of U for one subject"""
        pm = self.pattern(mask)
        mu_u = self.mu_u(w)[0]
        if pm.m == 0:
            return mu_u, pm.psi_tilde
        resid = np.asarray(x, dtype=float)[pm.observed] - self.mu_x(w, mu_u[None, :])[0, pm.observed]
        return mu_u + pm.gain @ resid, pm.psi_tilde

    def directions(self, W: np.ndarray, mu_u: Optional[np.ndarray] = None) -> List[DirectionMoments]:
        """
        Derivatives of (mu_u, psi_u, mu_x, omega_x) along each theta3 slot.

        Args:
            W: Subject covariates (N x r)
            mu_u: Latent means for W, recomputed when omitted

        Returns:
            One DirectionMoments per theta3 slot, in packing order
        """
        W = np.atleast_2d(W)
        mats = self.mats
        N, l = W.shape[0], self.spec.l
        base = mats.alpha + W @ mats.gamma2.T
        if mu_u is None:
            mu_u = base @ self.a_inv.T
        out = []
        for d in mats.directions:
            d_mu_u = np.zeros((N, l))
            d_psi_u = np.zeros((l, l))
            if d.gamma1 is not None:
                d_a_inv = self.a_inv @ d.gamma1 @ self.a_inv
                d_mu_u += base @ d_a_inv.T
                t = d_a_inv @ mats.psi @ self.a_inv.T
                d_psi_u += t + t.T
            if d.alpha is not None:
                d_mu_u += d.alpha @ self.a_inv.T
            if d.gamma2 is not None:
                d_mu_u += (W @ d.gamma2.T) @ self.a_inv.T
            if d.psi is not None:
                d_psi_u += self.a_inv @ d.psi @ self.a_inv.T

            d_mu_x = d_mu_u @ mats.lam.T
            d_omega_x = mats.lam @ d_psi_u @ mats.lam.T
            if d.nu is not None:
                d_mu_x = d_mu_x + d.nu
            if d.lam is not None:
                d_mu_x += mu_u @ d.lam.T
                t = d.lam @ self.psi_u @ mats.lam.T
                d_omega_x += t + t.T
            if d.K is not None:
                d_mu_x += W @ d.K.T
            if d.omega_delta is not None:
                d_omega_x += d.omega_delta
            out.append(DirectionMoments(d_mu_u, _sym(d_psi_u), d_mu_x, _sym(d_omega_x), d.lam))
        return out

    def bind(self, dataset: Dataset) -> "ExposureState":
        return ExposureState(self, dataset)


class ExposureState:
    """
    Exposure quantities for every subject of a dataset at a fixed theta3.

    Per-pattern arrays are indexed by the dataset's pattern group order.
    """

    def __init__(self, model: ExposureModel, dataset: Dataset):
        self.model = model
        self.dataset = dataset

    @cached_property
    def mu_u(self) -> np.ndarray:
        return self.model.mu_u(self.dataset.W)

    @cached_property
    def mu_x(self) -> np.ndarray:
        return self.model.mu_x(self.dataset.W, self.mu_u)

    @cached_property
    def pattern_moments(self) -> List[PatternMoments]:
        return [self.model.pattern(g.mask) for g in self.dataset.patterns]

    def _residual(self, g: int) -> np.ndarray:
        group = self.dataset.patterns[g]
        obs = group.observed
        return self.dataset.X[np.ix_(group.index, obs)] - self.mu_x[np.ix_(group.index, obs)]

    @cached_property
    def u_tilde(self) -> np.ndarray:
        out = self.mu_u.copy()
        for g, (group, pm) in enumerate(zip(self.dataset.patterns, self.pattern_moments)):
            if pm.m:
                out[group.index] += self._residual(g) @ pm.gain.T
        return out

    @cached_property
    def psi_tilde(self) -> np.ndarray:
        """Conditional latent covariance per pattern group (G x l x l)"""
        return np.array([pm.psi_tilde for pm in self.pattern_moments])

    @cached_property
    def loglik_i(self) -> np.ndarray:
        """Observed-surrogate log-density per subject; 0 when nothing is observed"""
        out = np.zeros(self.dataset.N)
        for g, (group, pm) in enumerate(zip(self.dataset.patterns, self.pattern_moments)):
            if not pm.m:
                continue
            resid = self._residual(g)
            solved = cho_solve(pm.chol, resid.T).T
            quad = np.sum(resid * solved, axis=1)
            out[group.index] = -0.5 * (pm.m * LOG_2PI + pm.logdet + quad)
        return out

    @cached_property
    def direction_moments(self) -> List[DirectionMoments]:
        return self.model.directions(self.dataset.W, self.mu_u)

    @cached_property
    def score_i(self) -> np.ndarray:
        """Per-subject analytic gradient of loglik_i with respect to theta3 (N x k3)"""
        dirs = self.direction_moments
        out = np.zeros((self.dataset.N, len(dirs)))
        for g, (group, pm) in enumerate(zip(self.dataset.patterns, self.pattern_moments)):
            if not pm.m:
                continue
            obs, idx = pm.observed, group.index
            Q = cho_solve(pm.chol, self._residual(g).T).T
            s_inv = pm.s_inv
            for k, dm in enumerate(dirs):
                d_mu = dm.d_mu_x[np.ix_(idx, obs)]
                d_s = dm.d_omega_x[np.ix_(obs, obs)]
                mean_part = np.sum(Q * d_mu, axis=1)
                cov_part = 0.5 * (np.sum((Q @ d_s) * Q, axis=1) - np.sum(s_inv * d_s))
                out[idx, k] = mean_part + cov_part
        return out

    @cached_property
    def eb_derivatives(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Derivatives of the EB scores along each theta3 slot.

        Returns:
            (d_u_tilde of shape k3 x N x l, d_psi_tilde of shape k3 x G x l x l)
        """
        dirs = self.direction_moments
        lam = self.model.mats.lam
        psi_u = self.model.psi_u
        N, l, G = self.dataset.N, self.model.spec.l, len(self.pattern_moments)
        d_u = np.zeros((len(dirs), N, l))
        d_psi = np.zeros((len(dirs), G, l, l))
        for g, (group, pm) in enumerate(zip(self.dataset.patterns, self.pattern_moments)):
            idx, obs = group.index, pm.observed
            resid = self._residual(g) if pm.m else None
            for k, dm in enumerate(dirs):
                if not pm.m:
                    d_u[k, idx] = dm.d_mu_u[idx]
                    d_psi[k, g] = dm.d_psi_u
                    continue
                d_cross = dm.d_psi_u @ lam[obs].T
                if dm.d_lam is not None:
                    d_cross = d_cross + psi_u @ dm.d_lam[obs].T
                d_s = dm.d_omega_x[np.ix_(obs, obs)]
                d_gain = (d_cross - pm.gain @ d_s) @ pm.s_inv
                d_u[k, idx] = dm.d_mu_u[idx] + resid @ d_gain.T - dm.d_mu_x[np.ix_(idx, obs)] @ pm.gain.T
                d_psi[k, g] = _sym(dm.d_psi_u - d_gain @ pm.cross.T - pm.gain @ d_cross.T)
        return d_u, d_psi

    def psi_tilde_of(self, i: int) -> np.ndarray:
        return self.psi_tilde[self.dataset.pattern_of[i]]


def latent_marginal_moments(spec: ModelSpec, theta3: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Mean and covariance of U given subject covariates.

    Raises:
        Singular: if I - gamma1 is numerically singular
    """
    model = ExposureModel(spec, theta3)
    return model.mu_u(w)[0], model.psi_u


def surrogate_marginal_moments(spec: ModelSpec, theta3: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of X given subject covariates"""
    model = ExposureModel(spec, theta3)
    return model.mu_x(w)[0], model.omega_x


def eb_scores(spec: ModelSpec, theta3: np.ndarray, x: np.ndarray, mask: np.ndarray,
              w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Empirical Bayes score E(U | observed X, W) and its conditional covariance"""
    return ExposureModel(spec, theta3).eb_scores(x, mask, w)


def selected_beta(spec: ModelSpec, theta1: np.ndarray) -> np.ndarray:
    """beta padded to all latents with zeros outside the outcome latents"""
    beta = np.zeros(spec.l)
    beta[list(spec.outcome_latents)] = np.asarray(theta1)[1:1 + len(spec.outcome_latents)]
    return beta


def outcome_conditional_moments(spec: ModelSpec, theta1: np.ndarray, theta2: np.ndarray,
                                u_tilde: np.ndarray, psi_tilde: np.ndarray, z: np.ndarray,
                                n_i: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Mean and covariance of the outcomes given the observed surrogates.

    Args:
        spec: Model specification
        theta1: (beta0, beta, kappa)
        theta2: Outcome covariance parameters
        u_tilde: EB score (l)
        psi_tilde: EB covariance (l x l)
        z: Occasion covariates (n_i x q)
        n_i: Number of occasions

    Returns:
        Tuple of (mean of length n_i, n_i x n_i covariance)
    """
    theta1 = np.asarray(theta1, dtype=float)
    beta = selected_beta(spec, theta1)
    kappa = theta1[1 + len(spec.outcome_latents):]
    z = np.asarray(z, dtype=float).reshape(n_i, spec.q)
    mu = theta1[0] + float(beta @ u_tilde) + z @ kappa
    omega_eps, _ = build_cov(spec.outcome_cov, theta2, n_i)
    inflation = float(beta @ psi_tilde @ beta)
    return mu, omega_eps + inflation * np.ones((n_i, n_i))


def subject_moments(params: ParamVector, subject) -> MomentSet:
    """Full MomentSet for one subject"""
    spec = params.spec
    model = ExposureModel(spec, params.theta3)
    mu_u = model.mu_u(subject.w)[0]
    mu_x = model.mu_x(subject.w, mu_u[None, :])[0]
    u_tilde, psi_tilde = model.eb_scores(subject.x, subject.mask, subject.w)
    mu_y, omega_y = outcome_conditional_moments(
        spec, params.theta1, params.theta2, u_tilde, psi_tilde, subject.z, subject.n_i
    )
    return MomentSet(mu_u, model.psi_u, mu_x, model.omega_x, u_tilde, psi_tilde, mu_y, omega_y)
