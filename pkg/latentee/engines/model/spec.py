"""
Model specification - fixed patterns of the exposure and outcome models
"""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from typing import List, Optional, Tuple

import numpy as np

from latentee.errors import SpecError

logger = logging.getLogger(__name__)

# Pattern entries: a finite number is a fixed value, NaN marks a free parameter.
FREE = np.nan


class CovKind(str, Enum):
    """Supported covariance structure families"""
    INDEPENDENCE = "independence"
    DIAGONAL = "diagonal"
    CS = "cs"
    CSH = "csh"
    AR1 = "ar1"
    HAR1 = "har1"
    UNSTRUCTURED = "unstructured"
    BLOCKED = "diagonal+ar1-blocks"


# Covariance is a linear function of the parameters for these kinds.
LINEAR_KINDS = frozenset({CovKind.INDEPENDENCE, CovKind.DIAGONAL, CovKind.CS, CovKind.UNSTRUCTURED})

# One parameter slot per dimension; the structure must declare its size.
SIZED_KINDS = frozenset({CovKind.DIAGONAL, CovKind.CSH, CovKind.HAR1, CovKind.UNSTRUCTURED, CovKind.BLOCKED})


@dataclass(frozen=True)
class CovStructure:
    """
    Covariance structure descriptor.

    For BLOCKED (measurement error), `fixed` maps surrogate index to a fixed
    variance and `blocks` lists disjoint ordered index groups sharing one
    AR(1) correlation.
    """
    kind: CovKind
    dim: Optional[int] = None
    fixed: Tuple[Tuple[int, float], ...] = ()
    blocks: Tuple[Tuple[int, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", CovKind(self.kind))

    @property
    def fixed_map(self) -> dict:
        return dict(self.fixed)

    @property
    def free_variances(self) -> List[int]:
        """Indices whose variance is a parameter (BLOCKED only)"""
        fixed = self.fixed_map
        return [j for j in range(self.dim or 0) if j not in fixed]

    @property
    def n_params(self) -> int:
        d = self.dim or 0
        kind = self.kind
        if kind == CovKind.INDEPENDENCE:
            return 1
        if kind in (CovKind.CS, CovKind.AR1):
            return 2
        if kind == CovKind.DIAGONAL:
            return d
        if kind in (CovKind.CSH, CovKind.HAR1):
            return d + 1
        if kind == CovKind.UNSTRUCTURED:
            return d * (d + 1) // 2
        return len(self.free_variances) + len(self.blocks)

    def param_names(self, labels: Optional[List[str]] = None) -> List[str]:
        """Slot names in packing order"""
        d = self.dim or 0
        labels = labels or [str(j + 1) for j in range(d)]
        kind = self.kind
        if kind == CovKind.INDEPENDENCE:
            return ["sigma2"]
        if kind == CovKind.CS:
            return ["sigma2", "sigma2_w"]
        if kind == CovKind.AR1:
            return ["sigma2", "rho"]
        if kind == CovKind.DIAGONAL:
            return [f"sigma2[{labels[j]}]" for j in range(d)]
        if kind in (CovKind.CSH, CovKind.HAR1):
            return [f"sigma[{labels[j]}]" for j in range(d)] + ["rho"]
        if kind == CovKind.UNSTRUCTURED:
            return [f"[{labels[i]},{labels[j]}]" for i in range(d) for j in range(i + 1)]
        names = [f"var[{labels[j]}]" for j in self.free_variances]
        names += [f"rho[{labels[b[0]]}..{labels[b[-1]]}]" for b in self.blocks]
        return names

    def transforms(self) -> List[Tuple[str, int]]:
        """
        Unconstrained transform groups as (kind, size).

        kinds: 'log' (positive), 'nonneg' (log, zero allowed in builders),
        'atanh' (correlation), 'chol' (vech of a positive-definite block).
        """
        d = self.dim or 0
        kind = self.kind
        if kind == CovKind.INDEPENDENCE:
            return [("log", 1)]
        if kind == CovKind.CS:
            return [("log", 1), ("nonneg", 1)]
        if kind == CovKind.AR1:
            return [("log", 1), ("atanh", 1)]
        if kind == CovKind.DIAGONAL:
            return [("log", 1)] * d
        if kind in (CovKind.CSH, CovKind.HAR1):
            return [("log", 1)] * d + [("atanh", 1)]
        if kind == CovKind.UNSTRUCTURED:
            return [("chol", d * (d + 1) // 2)]
        return [("log", 1)] * len(self.free_variances) + [("atanh", 1)] * len(self.blocks)


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=float).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """
    Declarative latent exposure model.

    Pattern arrays hold fixed values, with NaN (FREE) marking free entries:
    nu (p), lambda (p x l), K (p x r), alpha (l), gamma1 (l x l, effect of
    column latent on row latent), gamma2 (l x r).
    """
    latents: Tuple[str, ...]
    surrogates: Tuple[str, ...]
    subject_covariates: Tuple[str, ...]
    occasion_covariates: Tuple[str, ...]
    lambda_pattern: np.ndarray
    nu_pattern: np.ndarray
    k_pattern: np.ndarray
    alpha_pattern: np.ndarray
    gamma1_pattern: np.ndarray
    gamma2_pattern: np.ndarray
    delta_cov: CovStructure
    psi_cov: CovStructure
    outcome_cov: CovStructure
    outcome_latents: Tuple[int, ...]
    name: str = "model"

    def __post_init__(self):
        for attr in ("latents", "surrogates", "subject_covariates", "occasion_covariates", "outcome_latents"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        p, l, r = len(self.surrogates), len(self.latents), len(self.subject_covariates)
        try:
            object.__setattr__(self, "lambda_pattern", _frozen(self.lambda_pattern, (p, l)))
            object.__setattr__(self, "nu_pattern", _frozen(self.nu_pattern, (p,)))
            object.__setattr__(self, "k_pattern", _frozen(self.k_pattern, (p, r)))
            object.__setattr__(self, "alpha_pattern", _frozen(self.alpha_pattern, (l,)))
            object.__setattr__(self, "gamma1_pattern", _frozen(self.gamma1_pattern, (l, l)))
            object.__setattr__(self, "gamma2_pattern", _frozen(self.gamma2_pattern, (l, r)))
        except ValueError as e:
            raise SpecError([f"pattern dimensions inconsistent with p={p}, l={l}, r={r}: {e}"])

    @property
    def p(self) -> int:
        return len(self.surrogates)

    @property
    def l(self) -> int:
        return len(self.latents)

    @property
    def r(self) -> int:
        return len(self.subject_covariates)

    @property
    def q(self) -> int:
        return len(self.occasion_covariates)

    @cached_property
    def layout(self):
        from latentee.engines.model.params import ParamLayout
        return ParamLayout(self)

    def with_outcome_cov(self, structure: CovStructure) -> "ModelSpec":
        """Copy of this spec with a different outcome covariance structure"""
        return replace(self, outcome_cov=structure)


def validate_spec(spec: ModelSpec) -> ModelSpec:
    """
    Check identifiability conventions and dimensions.

    Returns the spec unchanged when valid; otherwise raises SpecError
    listing every violation found.
    """
    violations = []
    p, l = spec.p, spec.l

    if p == 0:
        violations.append("model declares no surrogates")
    if l == 0:
        violations.append("model declares no latent variables")
    for names, what in ((spec.latents, "latent"), (spec.surrogates, "surrogate"),
                        (spec.subject_covariates, "subject covariate"),
                        (spec.occasion_covariates, "occasion covariate")):
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            violations.append(f"duplicate {what} names: {dupes}")

    for k, latent in enumerate(spec.latents):
        col = spec.lambda_pattern[:, k]
        fixed = col[~np.isnan(col)]
        if not np.any(fixed != 0):
            violations.append(f"latent '{latent}' has no scale-fixing loading (needs one fixed nonzero loading)")

    diag = np.diag(spec.gamma1_pattern)
    for k, latent in enumerate(spec.latents):
        if np.isnan(diag[k]) or diag[k] != 0:
            violations.append(f"gamma1[{latent},{latent}] must be fixed at 0")

    fixed_g1 = np.nan_to_num(spec.gamma1_pattern, nan=0.0)
    if l and np.linalg.cond(np.eye(l) - fixed_g1) > 1e12:
        violations.append("I - gamma1 is singular at its fixed entries")

    for k in spec.outcome_latents:
        if not 0 <= k < l:
            violations.append(f"outcome latent index {k} outside 0..{l - 1}")
    if len(set(spec.outcome_latents)) != len(spec.outcome_latents):
        violations.append("outcome latents repeated")

    delta = spec.delta_cov
    if delta.kind != CovKind.BLOCKED or delta.dim != p:
        violations.append(f"measurement error structure must be '{CovKind.BLOCKED.value}' of dimension p={p}")
    for j, value in delta.fixed:
        if not 0 <= j < p:
            violations.append(f"fixed measurement error index {j} outside 0..{p - 1}")
        elif value < 0:
            violations.append(f"fixed measurement error variance for '{spec.surrogates[j]}' is negative")
    seen = set()
    for block in delta.blocks:
        if len(block) < 2:
            violations.append(f"AR(1) block {list(block)} needs at least two surrogates")
        if any(not 0 <= j < p for j in block):
            violations.append(f"AR(1) block {list(block)} references unknown surrogates")
        overlap = seen.intersection(block)
        if overlap:
            names = [spec.surrogates[j] for j in sorted(overlap) if 0 <= j < p]
            violations.append(f"AR(1) blocks overlap on {names}")
        seen.update(block)

    if spec.psi_cov.kind not in (CovKind.UNSTRUCTURED, CovKind.DIAGONAL) or spec.psi_cov.dim != l:
        violations.append(f"latent covariance must be unstructured or diagonal of dimension l={l}")

    out = spec.outcome_cov
    if out.kind == CovKind.BLOCKED:
        violations.append("outcome covariance cannot use the measurement-error structure")
    if out.kind in SIZED_KINDS and not out.dim:
        violations.append(f"outcome covariance '{out.kind.value}' needs a declared number of occasions")

    if violations:
        logger.error(f"Model '{spec.name}' failed validation: {violations}")
        raise SpecError(violations)
    return spec
