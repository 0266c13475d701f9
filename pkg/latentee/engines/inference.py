"""
Sandwich variance estimation and Wald reporting
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np
from scipy.stats import norm

from latentee.config import settings
from latentee.engines.joint import JointLikelihood
from latentee.engines.model.data import Dataset
from latentee.engines.model.params import ParamVector, unpack_params
from latentee.engines.model.spec import ModelSpec
from latentee.engines.moments import ExposureModel, ExposureState
from latentee.engines.numdiff import checked_jacobian
from latentee.engines.outcome import OutcomeSystem, Scheme, pinned_slots
from latentee.errors import Singular

logger = logging.getLogger(__name__)

Z_975 = norm.ppf(0.975)


class EstimatingSystem:
    """
    Stacked per-subject estimating functions S_i(theta).

    For an EE scheme the stack is (outcome equations, theta3 score); with
    scheme None it is the joint likelihood score. Exposure states are
    cached by theta3 so perturbing theta1/theta2 reuses them.
    """

    def __init__(self, spec: ModelSpec, dataset: Dataset, scheme: Optional[Scheme]):
        self.spec = spec
        self.dataset = dataset
        self.scheme = scheme
        self._states: Dict[bytes, ExposureState] = {}

    def state(self, theta3: np.ndarray) -> ExposureState:
        key = np.asarray(theta3, dtype=float).tobytes()
        if key not in self._states:
            if len(self._states) > 64:
                self._states.clear()
            self._states[key] = ExposureModel(self.spec, theta3).bind(self.dataset)
        return self._states[key]

    def contributions(self, theta: Union[ParamVector, np.ndarray]) -> np.ndarray:
        values = theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)
        params = unpack_params(self.spec, values)
        state = self.state(params.theta3)
        if self.scheme is None:
            return JointLikelihood(self.spec, self.dataset, params, state=state).score_i()
        outcome = OutcomeSystem(self.spec, state, self.scheme).contributions(params.theta1, params.theta2)
        return np.hstack([outcome, state.score_i])

    def mean(self, theta) -> np.ndarray:
        return self.contributions(theta).mean(axis=0)


@dataclass
class SandwichParts:
    """A, B and the block map; the outcome block is (theta1, theta2)"""
    A: np.ndarray
    B: np.ndarray
    N: int
    k1: int
    k2: int
    k3: int
    names: List[str] = field(default_factory=list)
    free: Optional[np.ndarray] = None

    @property
    def outcome(self) -> slice:
        return slice(0, self.k1 + self.k2)

    @property
    def exposure(self) -> slice:
        return slice(self.k1 + self.k2, self.k1 + self.k2 + self.k3)

    def block(self, which: str) -> np.ndarray:
        """e.g. block('B13'): rows of block 1 (outcome), columns of block 3 (theta3)"""
        mat = self.A if which[0] == "A" else self.B
        pick = {"1": self.outcome, "3": self.exposure}
        return mat[pick[which[1]], pick[which[2]]]


@dataclass
class SandwichResult:
    """
    Full sandwich covariance and the decomposition of the outcome block.

    naive + correction + cross equals the outcome block of `full`; cross
    vanishes in expectation.
    """
    full: np.ndarray
    naive: np.ndarray
    correction: np.ndarray
    cross: np.ndarray
    theta3: np.ndarray
    decomposition_error: float
    k1: int

    @property
    def theta1(self) -> np.ndarray:
        return self.full[:self.k1, :self.k1]

    def theta1_terms(self) -> Dict[str, np.ndarray]:
        k = self.k1
        return {
            "naive": self.naive[:k, :k],
            "correction": self.correction[:k, :k],
            "cross": self.cross[:k, :k],
        }


def estimate_A(system: EstimatingSystem, theta) -> np.ndarray:
    """Empirical outer product of the stacked contributions"""
    S = system.contributions(theta)
    return S.T @ S / S.shape[0]


def estimate_B(system: EstimatingSystem, theta, free: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Empirical Jacobian of the mean stacked contributions.

    With a `free` mask only the free coordinates are perturbed and only their
    equations are kept; fixed coordinates stay at their value.

    Raises:
        NumericJacobianFailure: step sizes h and 2h disagree
    """
    values = theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)
    if free is None:
        return checked_jacobian(system.mean, values)

    def reduced(v: np.ndarray) -> np.ndarray:
        full = values.copy()
        full[free] = v
        return system.mean(full)[free]

    return checked_jacobian(reduced, values[free])


def free_slots(spec: ModelSpec, theta) -> np.ndarray:
    """Parameters estimated in the interior; shared variances pinned at zero are fixed"""
    values = theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)
    layout = spec.layout
    free = np.ones(layout.size, dtype=bool)
    free[layout.slice2] = ~pinned_slots(spec.outcome_cov, values[layout.slice2])
    return free


def sandwich_parts(spec: ModelSpec, dataset: Dataset, theta, scheme: Optional[Scheme]) -> SandwichParts:
    """
    A and B over the free parameters.

    Boundary-pinned outcome-covariance slots are held fixed: their rows and
    columns are dropped here and come back as NaN in the sandwich.
    """
    system = EstimatingSystem(spec, dataset, scheme)
    layout = spec.layout
    free = free_slots(spec, theta)
    if free.all():
        return SandwichParts(
            A=estimate_A(system, theta), B=estimate_B(system, theta), N=dataset.N,
            k1=layout.k1, k2=layout.k2, k3=layout.k3, names=layout.names,
        )
    logger.warning(f"Holding {int((~free).sum())} boundary parameter(s) fixed in the sandwich: "
                   f"{[n for n, f in zip(layout.names, free) if not f]}")
    A = estimate_A(system, theta)[np.ix_(free, free)]
    return SandwichParts(
        A=A, B=estimate_B(system, theta, free), N=dataset.N,
        k1=layout.k1, k2=int(free[layout.slice2].sum()), k3=layout.k3,
        names=[n for n, f in zip(layout.names, free) if f], free=free,
    )


def _inverse(mat: np.ndarray, what: str) -> np.ndarray:
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or 1.0 / cond < settings.rcond_min:
        logger.error(f"{what} is numerically singular (condition number {cond:.3g})")
        raise Singular(f"{what} is numerically singular", condition=float(cond))
    return np.linalg.inv(mat)


def _expand(mat: np.ndarray, free: np.ndarray) -> np.ndarray:
    """Embed a free-parameter block into the full layout; fixed slots are NaN"""
    out = np.full((free.size, free.size), np.nan)
    out[np.ix_(free, free)] = mat
    return out


def sandwich_var(parts: SandwichParts) -> SandwichResult:
    """
    B^-1 A B^-T / N with the block decomposition of the outcome parameters.

    Raises:
        Singular: B or one of its diagonal blocks is numerically singular
    """
    A, B, N = parts.A, parts.B, parts.N
    b_inv = _inverse(B, "estimating-equation Jacobian B")
    full = b_inv @ A @ b_inv.T / N
    full = 0.5 * (full + full.T)

    o, x = parts.outcome, parts.exposure
    b_oo_inv = _inverse(B[o, o], "outcome block of B")
    b_33_inv = _inverse(B[x, x], "exposure block of B")
    b_o3 = B[o, x]
    var3 = b_33_inv @ A[x, x] @ b_33_inv.T / N
    naive = b_oo_inv @ A[o, o] @ b_oo_inv.T / N
    correction = b_oo_inv @ b_o3 @ var3 @ b_o3.T @ b_oo_inv.T
    mixed = b_o3 @ b_33_inv @ A[x, o]
    cross = -b_oo_inv @ (mixed + mixed.T) @ b_oo_inv.T / N
    block = naive + correction + cross

    target = full[o, o]
    scale = max(np.max(np.abs(target)), np.finfo(float).tiny)
    error = float(np.max(np.abs(block - target)) / scale)
    if error > 1e-8:
        logger.warning(f"Block decomposition differs from the full sandwich by {error:.2e} (relative)")
    if parts.free is not None:
        outcome_free = parts.free[:parts.free.size - parts.k3]
        full = _expand(full, parts.free)
        naive, correction, cross = (_expand(m, outcome_free) for m in (naive, correction, cross))
    return SandwichResult(full=full, naive=naive, correction=correction, cross=cross,
                          theta3=var3, decomposition_error=error, k1=parts.k1)


@dataclass
class WaldRow:
    name: str
    estimate: float
    se: Optional[float]
    z: Optional[float]
    p_two_sided: Optional[float]
    p_one_sided: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]


@dataclass
class WaldReport:
    rows: List[WaldRow]

    def row(self, name: str) -> WaldRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def as_records(self) -> List[dict]:
        return [r.__dict__.copy() for r in self.rows]


def wald_report(names: List[str], estimates: np.ndarray, cov: Optional[np.ndarray]) -> WaldReport:
    """
    Per-parameter Wald statistics.

    The one-sided p-value is for the alternative in the direction of the
    estimate; with no covariance only the estimates are reported.
    """
    estimates = np.asarray(estimates, dtype=float)
    rows = []
    for k, name in enumerate(names):
        est = float(estimates[k])
        if cov is None or not np.isfinite(cov[k, k]) or cov[k, k] <= 0:
            rows.append(WaldRow(name, est, None, None, None, None, None, None))
            continue
        se = float(np.sqrt(cov[k, k]))
        z = est / se
        rows.append(WaldRow(
            name=name, estimate=est, se=se, z=z,
            p_two_sided=float(2.0 * norm.sf(abs(z))),
            p_one_sided=float(norm.sf(abs(z))),
            ci_low=est - Z_975 * se, ci_high=est + Z_975 * se,
        ))
    return WaldReport(rows)
