"""
Parameter packing - theta = (theta1, theta2, theta3) with constrained and
unconstrained representations.

Packing order:
    theta1: beta0, beta (one per outcome latent, in declaration order), kappa
    theta2: outcome covariance slots (see CovStructure.param_names)
    theta3: free nu, free Lambda (row-major), free K (row-major), free alpha,
            free Gamma1 (row-major), free Gamma2 (row-major),
            measurement-error slots, latent covariance slots
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from latentee.engines.model.covariance import build_cov, matrix_to_vech, vech_to_matrix
from latentee.engines.model.spec import CovStructure, ModelSpec
from latentee.errors import BadParam

# Names of the mean/regression matrices held in theta3, in packing order.
EXPOSURE_MATRICES = ("nu", "lam", "K", "alpha", "gamma1", "gamma2")


def _free_positions(pattern: np.ndarray) -> List[Tuple[int, ...]]:
    return [tuple(int(i) for i in idx) for idx in np.argwhere(np.isnan(pattern))]


class ParamLayout:
    """
    Names, slices and transform groups of a spec's parameter vector.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        sel = [spec.latents[k] for k in spec.outcome_latents]
        self.theta1_names = ["beta0"] + [f"beta[{u}]" for u in sel] + [f"kappa[{z}]" for z in spec.occasion_covariates]

        out = spec.outcome_cov
        self.theta2_names = [f"omega_eps.{n}" for n in out.param_names()]

        self.free = {
            "nu": _free_positions(spec.nu_pattern),
            "lam": _free_positions(spec.lambda_pattern),
            "K": _free_positions(spec.k_pattern),
            "alpha": _free_positions(spec.alpha_pattern),
            "gamma1": _free_positions(spec.gamma1_pattern),
            "gamma2": _free_positions(spec.gamma2_pattern),
        }
        X, U, W = spec.surrogates, spec.latents, spec.subject_covariates
        names = [f"nu[{X[i]}]" for (i,) in self.free["nu"]]
        names += [f"lambda[{X[i]},{U[k]}]" for i, k in self.free["lam"]]
        names += [f"K[{X[i]},{W[k]}]" for i, k in self.free["K"]]
        names += [f"alpha[{U[k]}]" for (k,) in self.free["alpha"]]
        names += [f"gamma1[{U[i]},{U[k]}]" for i, k in self.free["gamma1"]]
        names += [f"gamma2[{U[i]},{W[k]}]" for i, k in self.free["gamma2"]]
        self.n_mean3 = len(names)
        names += [f"omega_delta.{n}" for n in spec.delta_cov.param_names(list(X))]
        names += [f"psi.{n}" for n in spec.psi_cov.param_names(list(U))]
        self.theta3_names = names

        self.k1 = len(self.theta1_names)
        self.k2 = len(self.theta2_names)
        self.k3 = len(self.theta3_names)
        self.slice1 = slice(0, self.k1)
        self.slice2 = slice(self.k1, self.k1 + self.k2)
        self.slice3 = slice(self.k1 + self.k2, self.k1 + self.k2 + self.k3)
        self.delta_slice = slice(self.n_mean3, self.n_mean3 + spec.delta_cov.n_params)
        self.psi_slice = slice(self.delta_slice.stop, self.k3)

        # (offset, kind, size) transform groups over the full vector
        groups = [(j, "real", 1) for j in range(self.k1)]
        groups += self._cov_groups(out, self.k1)
        groups += [(self.slice3.start + j, "real", 1) for j in range(self.n_mean3)]
        groups += self._cov_groups(spec.delta_cov, self.slice3.start + self.delta_slice.start)
        groups += self._cov_groups(spec.psi_cov, self.slice3.start + self.psi_slice.start)
        self.groups = groups

    @staticmethod
    def _cov_groups(structure: CovStructure, offset: int):
        groups = []
        for kind, size in structure.transforms():
            groups.append((offset, kind, size))
            offset += size
        return groups

    @property
    def names(self) -> List[str]:
        return self.theta1_names + self.theta2_names + self.theta3_names

    @property
    def size(self) -> int:
        return self.k1 + self.k2 + self.k3

    def theta3_groups(self):
        """Transform groups restricted to theta3, offsets relative to theta3"""
        start = self.slice3.start
        return [(o - start, kind, size) for o, kind, size in self.groups if o >= start]


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Constrained parameter values for one spec"""
    spec: ModelSpec
    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray

    def __post_init__(self):
        layout = self.spec.layout
        for attr, k in (("theta1", layout.k1), ("theta2", layout.k2), ("theta3", layout.k3)):
            arr = np.array(getattr(self, attr), dtype=float).reshape(-1)
            if arr.shape != (k,):
                raise BadParam(f"{attr} expects {k} values, got {arr.shape[0]}")
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)

    @property
    def layout(self) -> ParamLayout:
        return self.spec.layout

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.theta1, self.theta2, self.theta3])

    @property
    def beta0(self) -> float:
        return float(self.theta1[0])

    @property
    def beta(self) -> np.ndarray:
        return self.theta1[1:1 + len(self.spec.outcome_latents)]

    @property
    def kappa(self) -> np.ndarray:
        return self.theta1[1 + len(self.spec.outcome_latents):]

    def replace(self, theta1=None, theta2=None, theta3=None) -> "ParamVector":
        return ParamVector(
            self.spec,
            self.theta1 if theta1 is None else theta1,
            self.theta2 if theta2 is None else theta2,
            self.theta3 if theta3 is None else theta3,
        )

    def as_dict(self) -> dict:
        return dict(zip(self.layout.names, self.values.tolist()))


def pack_params(params: ParamVector) -> np.ndarray:
    """Flat constrained vector in packing order"""
    return params.values


def unpack_params(spec: ModelSpec, values: np.ndarray) -> ParamVector:
    """Split a flat constrained vector into its theta blocks"""
    layout = spec.layout
    values = np.asarray(values, dtype=float)
    if values.shape != (layout.size,):
        raise BadParam(f"expected {layout.size} parameter values, got {values.shape}")
    return ParamVector(spec, values[layout.slice1], values[layout.slice2], values[layout.slice3])


def _chol_forward(block: np.ndarray) -> np.ndarray:
    d = int(round((np.sqrt(8 * len(block) + 1) - 1) / 2))
    try:
        L = np.linalg.cholesky(vech_to_matrix(block, d))
    except np.linalg.LinAlgError:
        raise BadParam("covariance block is not positive definite")
    L[np.diag_indices(d)] = np.log(np.diag(L))
    rows, cols = np.tril_indices(d)
    return L[rows, cols]


def _chol_inverse(block: np.ndarray) -> np.ndarray:
    d = int(round((np.sqrt(8 * len(block) + 1) - 1) / 2))
    L = np.zeros((d, d))
    L[np.tril_indices(d)] = block
    L[np.diag_indices(d)] = np.exp(np.diag(L))
    return matrix_to_vech(L @ L.T)


def transform_forward(values: np.ndarray, groups) -> np.ndarray:
    """Constrained -> unconstrained over the given transform groups"""
    out = np.array(values, dtype=float)
    for offset, kind, size in groups:
        seg = slice(offset, offset + size)
        v = out[seg]
        if kind in ("log", "nonneg"):
            if np.any(v <= 0):
                raise BadParam(f"variance parameter at position {offset} must be positive, got {v.tolist()}")
            out[seg] = np.log(v)
        elif kind == "atanh":
            if np.any(np.abs(v) >= 1):
                raise BadParam(f"correlation parameter at position {offset} outside (-1, 1): {v.tolist()}")
            out[seg] = np.arctanh(v)
        elif kind == "chol":
            out[seg] = _chol_forward(v)
    return out


def transform_inverse(values: np.ndarray, groups) -> np.ndarray:
    """Unconstrained -> constrained over the given transform groups"""
    out = np.array(values, dtype=float)
    for offset, kind, size in groups:
        seg = slice(offset, offset + size)
        v = out[seg]
        if kind in ("log", "nonneg"):
            out[seg] = np.exp(v)
        elif kind == "atanh":
            out[seg] = np.tanh(v)
        elif kind == "chol":
            out[seg] = _chol_inverse(v)
    return out


def to_unconstrained(params: ParamVector) -> np.ndarray:
    return transform_forward(params.values, params.layout.groups)


def from_unconstrained(spec: ModelSpec, values: np.ndarray) -> ParamVector:
    return unpack_params(spec, transform_inverse(values, spec.layout.groups))


@dataclass
class ExposureDirection:
    """
    Derivative of the exposure matrices along one theta3 slot; None means zero.
    """
    nu: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    gamma1: Optional[np.ndarray] = None
    gamma2: Optional[np.ndarray] = None
    omega_delta: Optional[np.ndarray] = None
    psi: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ExposureMatrices:
    """theta3 expanded into the full exposure-model matrices"""
    nu: np.ndarray
    lam: np.ndarray
    K: np.ndarray
    alpha: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    omega_delta: np.ndarray
    psi: np.ndarray
    directions: List[ExposureDirection] = field(default_factory=list, repr=False)

    @classmethod
    def from_theta3(cls, spec: ModelSpec, theta3: np.ndarray) -> "ExposureMatrices":
        """
        Fill the patterns with theta3 and collect unit directions per slot.

        Args:
            spec: Model specification
            theta3: Constrained exposure parameters

        Returns:
            ExposureMatrices with one ExposureDirection per theta3 slot
        """
        layout = spec.layout
        theta3 = np.asarray(theta3, dtype=float)
        if theta3.shape != (layout.k3,):
            raise BadParam(f"theta3 expects {layout.k3} values, got {theta3.shape}")
        mats = {
            "nu": np.array(spec.nu_pattern),
            "lam": np.array(spec.lambda_pattern),
            "K": np.array(spec.k_pattern),
            "alpha": np.array(spec.alpha_pattern),
            "gamma1": np.array(spec.gamma1_pattern),
            "gamma2": np.array(spec.gamma2_pattern),
        }
        directions = []
        j = 0
        for name in EXPOSURE_MATRICES:
            for pos in layout.free[name]:
                mats[name][pos] = theta3[j]
                unit = np.zeros_like(mats[name])
                unit[pos] = 1.0
                directions.append(ExposureDirection(**{name: unit}))
                j += 1

        omega_delta, d_delta = build_cov(spec.delta_cov, theta3[layout.delta_slice], spec.p)
        directions.extend(ExposureDirection(omega_delta=d) for d in d_delta)
        psi, d_psi = build_cov(spec.psi_cov, theta3[layout.psi_slice], spec.l)
        directions.extend(ExposureDirection(psi=d) for d in d_psi)
        return cls(omega_delta=omega_delta, psi=psi, directions=directions, **mats)


def transform_jacobian(values: np.ndarray, groups) -> np.ndarray:
    """
    d constrained / d unconstrained at the unconstrained point `values`.

    Block diagonal over transform groups; used to carry constrained-scale
    scores onto the optimizer's scale.
    """
    values = np.asarray(values, dtype=float)
    jac = np.eye(values.size)
    for offset, kind, size in groups:
        seg = slice(offset, offset + size)
        v = values[seg]
        if kind in ("log", "nonneg"):
            jac[seg, seg] = np.diag(np.exp(v))
        elif kind == "atanh":
            jac[seg, seg] = np.diag(1.0 - np.tanh(v) ** 2)
        elif kind == "chol":
            d = int(round((np.sqrt(8 * size + 1) - 1) / 2))
            L = np.zeros((d, d))
            L[np.tril_indices(d)] = v
            L[np.diag_indices(d)] = np.exp(np.diag(L))
            block = np.zeros((size, size))
            for col, (a, b) in enumerate(zip(*np.tril_indices(d))):
                dL = np.zeros((d, d))
                dL[a, b] = L[a, b] if a == b else 1.0
                dS = dL @ L.T + L @ dL.T
                block[:, col] = matrix_to_vech(dS)
            jac[seg, seg] = block
    return jac
