"""
Covariance structure builders with parameter derivatives
"""
from typing import List, Tuple

import numpy as np

from latentee.engines.model.spec import CovKind, CovStructure
from latentee.errors import BadParam


def _lag(n: int) -> np.ndarray:
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :])


def _check_positive(values, what: str, allow_zero: bool = False):
    values = np.atleast_1d(values)
    bad = values < 0 if allow_zero else values <= 0
    if np.any(bad) or not np.all(np.isfinite(values)):
        raise BadParam(f"{what} must be {'non-negative' if allow_zero else 'positive'}, got {values.tolist()}")


def _check_corr(rho: float):
    if not np.isfinite(rho) or abs(rho) >= 1:
        raise BadParam(f"correlation must lie in (-1, 1), got {rho}")


def vech_to_matrix(values: np.ndarray, d: int) -> np.ndarray:
    """Symmetric matrix from its lower triangle, row-major"""
    m = np.zeros((d, d))
    rows, cols = np.tril_indices(d)
    m[rows, cols] = values
    m[cols, rows] = values
    return m


def matrix_to_vech(m: np.ndarray) -> np.ndarray:
    rows, cols = np.tril_indices(m.shape[0])
    return m[rows, cols].copy()


def build_cov(structure: CovStructure, params: np.ndarray, n: int) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    Build an n x n covariance matrix and its derivative with respect to each
    parameter slot.

    Sized kinds build the leading n x n block of their declared dimension.

    Args:
        structure: Covariance structure descriptor
        params: Constrained parameter slice for the structure
        n: Requested dimension

    Returns:
        Tuple of (matrix, list of d matrix / d param_k)
    """
    params = np.asarray(params, dtype=float)
    if params.shape != (structure.n_params,):
        raise BadParam(f"{structure.kind.value} expects {structure.n_params} parameters, got {params.shape}")
    kind = structure.kind
    if kind in (CovKind.DIAGONAL, CovKind.CSH, CovKind.HAR1, CovKind.UNSTRUCTURED, CovKind.BLOCKED):
        if n > structure.dim:
            raise BadParam(f"{kind.value} of dimension {structure.dim} cannot build a {n} x {n} block")

    if kind == CovKind.INDEPENDENCE:
        _check_positive(params[0], "variance")
        eye = np.eye(n)
        return params[0] * eye, [eye]

    if kind == CovKind.CS:
        sigma2, sigma2_w = params
        _check_positive(sigma2, "variance")
        _check_positive(sigma2_w, "shared variance", allow_zero=True)
        eye, ones = np.eye(n), np.ones((n, n))
        return sigma2 * eye + sigma2_w * ones, [eye, ones]

    if kind == CovKind.AR1:
        sigma2, rho = params
        _check_positive(sigma2, "variance")
        _check_corr(rho)
        lag = _lag(n)
        corr = rho ** lag
        dcorr = np.where(lag > 0, lag * rho ** np.maximum(lag - 1, 0), 0.0)
        return sigma2 * corr, [corr, sigma2 * dcorr]

    if kind == CovKind.DIAGONAL:
        v = params[:n]
        _check_positive(params, "variance")
        derivs = []
        for k in range(structure.dim):
            d = np.zeros((n, n))
            if k < n:
                d[k, k] = 1.0
            derivs.append(d)
        return np.diag(v), derivs

    if kind in (CovKind.CSH, CovKind.HAR1):
        sd, rho = params[:-1], params[-1]
        _check_positive(sd, "standard deviation")
        _check_corr(rho)
        s = sd[:n]
        lag = _lag(n)
        if kind == CovKind.CSH:
            corr = np.where(lag > 0, rho, 1.0)
            dcorr = np.where(lag > 0, 1.0, 0.0)
        else:
            corr = rho ** lag
            dcorr = np.where(lag > 0, lag * rho ** np.maximum(lag - 1, 0), 0.0)
        outer = np.outer(s, s)
        mat = outer * corr
        if kind == CovKind.CSH and np.linalg.eigvalsh(mat).min() <= 0:
            raise BadParam(f"heterogeneous compound symmetry not positive definite at rho={rho}")
        derivs = []
        for k in range(structure.dim):
            d = np.zeros((n, n))
            if k < n:
                d[k, :] += s * corr[k, :]
                d[:, k] += s * corr[:, k]
            derivs.append(d)
        derivs.append(outer * dcorr)
        return mat, derivs

    if kind == CovKind.UNSTRUCTURED:
        d = structure.dim
        full = vech_to_matrix(params, d)
        try:
            np.linalg.cholesky(full)
        except np.linalg.LinAlgError:
            raise BadParam("unstructured covariance is not positive definite")
        derivs = []
        for i, j in zip(*np.tril_indices(d)):
            e = np.zeros((d, d))
            e[i, j] = 1.0
            e[j, i] = 1.0
            derivs.append(e[:n, :n])
        return full[:n, :n], derivs

    return _build_blocked(structure, params, n)


def _build_blocked(structure: CovStructure, params: np.ndarray, n: int):
    """Diagonal measurement error with AR(1)-correlated surrogate groups"""
    d = structure.dim
    free = structure.free_variances
    n_free = len(free)
    var = np.zeros(d)
    for j, value in structure.fixed:
        var[j] = value
    var[free] = params[:n_free]
    _check_positive(params[:n_free], "measurement error variance")
    _check_positive(var, "measurement error variance", allow_zero=True)
    rhos = params[n_free:]
    for rho in rhos:
        _check_corr(rho)

    sd = np.sqrt(var)
    mat = np.diag(var)
    dvar = [np.zeros((d, d)) for _ in free]
    drho = [np.zeros((d, d)) for _ in rhos]
    slot = {j: k for k, j in enumerate(free)}
    for jk, j in enumerate(free):
        dvar[jk][j, j] = 1.0
    for b, block in enumerate(structure.blocks):
        rho = rhos[b]
        for a, ja in enumerate(block):
            for c, jc in enumerate(block):
                if a == c:
                    continue
                lag = abs(a - c)
                mat[ja, jc] = sd[ja] * sd[jc] * rho ** lag
                drho[b][ja, jc] = sd[ja] * sd[jc] * lag * rho ** (lag - 1)
                # d sqrt(v_a v_c) / d v_a = sd_c / (2 sd_a)
                if ja in slot:
                    dvar[slot[ja]][ja, jc] += 0.5 * sd[jc] / sd[ja] * rho ** lag
                if jc in slot:
                    dvar[slot[jc]][ja, jc] += 0.5 * sd[ja] / sd[jc] * rho ** lag
    derivs = [m[:n, :n] for m in dvar + drho]
    return mat[:n, :n], derivs
