"""
Quasi-Newton driver on the unconstrained parameter scale
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.optimize import minimize

from latentee.config import settings
from latentee.engines.numdiff import central_gradient
from latentee.errors import BadParam, NotConverged, Singular

logger = logging.getLogger(__name__)

# Objective value returned outside the admissible region; the line search backs off.
INADMISSIBLE = 1e10


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    iterations: int
    converged: bool
    message: str
    trace: List[float] = field(default_factory=list)


class QuasiNewton:
    """
    BFGS minimization of an objective that may raise BadParam/Singular.

    Args:
        objective: Scalar function of the unconstrained vector
        gradient: Analytic gradient, or None for central differences
        label: Name used in log messages
    """

    def __init__(self, objective: Callable[[np.ndarray], float],
                 gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 label: str = "objective"):
        self.objective = objective
        self.gradient = gradient
        self.label = label
        self._cache = {}

    def _fun(self, u: np.ndarray) -> float:
        key = u.tobytes()
        if key not in self._cache:
            try:
                value = float(self.objective(u))
                if not np.isfinite(value):
                    value = INADMISSIBLE
            except (BadParam, Singular) as e:
                logger.debug(f"{self.label}: inadmissible point ({e.message})")
                value = INADMISSIBLE
            self._cache = {key: value}
        return self._cache[key]

    def _grad(self, u: np.ndarray) -> np.ndarray:
        try:
            if self.gradient is not None:
                g = np.asarray(self.gradient(u), dtype=float)
            else:
                g = central_gradient(self.objective, u, settings.fd_step)
        except (BadParam, Singular):
            return np.zeros_like(u)
        return np.where(np.isfinite(g), g, 0.0)

    def run(self, x0: np.ndarray, gtol: Optional[float] = None, max_iter: Optional[int] = None,
            raise_on_failure: bool = True) -> OptimResult:
        """
        Minimize from x0.

        Raises:
            NotConverged: when the iteration cap is hit or the line search
                stalls away from a stationary point (best iterate attached)
        """
        gtol = gtol or settings.grad_tol
        max_iter = max_iter or settings.max_iter
        x0 = np.asarray(x0, dtype=float)
        trace = [self._fun(x0)]
        if trace[0] >= INADMISSIBLE:
            raise BadParam(f"{self.label}: starting values are inadmissible")

        def callback(xk):
            trace.append(self._fun(xk))

        res = minimize(self._fun, x0, jac=self._grad, method="BFGS", callback=callback,
                       options={"gtol": gtol, "maxiter": max_iter})
        grad_norm = float(np.max(np.abs(self._grad(res.x))))
        rel_change = abs(trace[-1] - trace[-2]) / max(1.0, abs(trace[-1])) if len(trace) > 1 else 0.0
        converged = bool(res.success) or (
            res.status == 2 and grad_norm < 10 * gtol and rel_change < max(settings.rel_obj_tol, 1e-8)
        ) or (res.status == 2 and grad_norm < gtol)
        result = OptimResult(np.asarray(res.x), float(res.fun), grad_norm, int(res.nit), converged,
                             str(res.message), trace)
        logger.info(f"{self.label}: {res.nit} iterations, objective {res.fun:.8g}, "
                    f"|grad| {grad_norm:.2e}, converged={converged}")
        if not converged and raise_on_failure:
            raise NotConverged(
                f"{self.label} did not converge after {res.nit} iterations: {res.message}",
                best=result, trace=trace, grad_norm=grad_norm,
            )
        return result
