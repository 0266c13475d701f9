"""
Central finite differences for gradients and Jacobians
"""
import logging
from typing import Callable, Optional

import numpy as np

from latentee.config import settings
from latentee.errors import BadParam, NumericJacobianFailure, Singular

logger = logging.getLogger(__name__)


def step_sizes(x: np.ndarray, rel_step: float) -> np.ndarray:
    """h_k = rel_step * max(1, |x_k|)"""
    return rel_step * np.maximum(1.0, np.abs(x))


def central_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float) -> np.ndarray:
    """Gradient of a scalar function by central differences with a fixed step"""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    e = np.zeros_like(x)
    for k in range(x.size):
        e[k] = step
        grad[k] = (fn(x + e) - fn(x - e)) / (2.0 * step)
        e[k] = 0.0
    return grad


def central_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                     rel_step: float) -> np.ndarray:
    """
    Jacobian J[i, k] = d fn_i / d x_k by central differences.

    Args:
        fn: Vector-valued function
        x: Evaluation point
        rel_step: Relative step; h_k = rel_step * max(1, |x_k|)

    Returns:
        Jacobian of shape (len(fn(x)), len(x))
    """
    x = np.asarray(x, dtype=float)
    h = step_sizes(x, rel_step)
    cols = []
    for k in range(x.size):
        up, down = x.copy(), x.copy()
        up[k] += h[k]
        down[k] -= h[k]
        try:
            f_up, f_down = np.asarray(fn(up)), np.asarray(fn(down))
        except (BadParam, Singular) as e:
            raise NumericJacobianFailure(
                f"finite-difference step left the admissible region at coordinate {k}: {e.message}",
                coordinate=k,
            )
        cols.append((f_up - f_down) / (2.0 * h[k]))
    return np.column_stack(cols)


def checked_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                     rel_step: Optional[float] = None, agreement_tol: Optional[float] = None) -> np.ndarray:
    """
    Central-difference Jacobian verified against a second step size.

    Raises:
        NumericJacobianFailure: if steps h and 2h disagree beyond agreement_tol
    """
    rel_step = rel_step or settings.jac_step
    agreement_tol = agreement_tol or settings.jac_agreement_tol
    fine = central_jacobian(fn, x, rel_step)
    coarse = central_jacobian(fn, x, 2.0 * rel_step)
    scale = max(np.linalg.norm(fine), np.finfo(float).tiny)
    rel = np.linalg.norm(fine - coarse) / scale
    logger.debug(f"Jacobian two-step relative disagreement {rel:.3e}")
    if rel > agreement_tol:
        raise NumericJacobianFailure(
            f"Jacobian step sizes disagree (relative error {rel:.3e} > {agreement_tol})",
            relative_error=rel,
        )
    return fine
