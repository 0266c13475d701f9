"""
Subject records and the pattern-grouped dataset
"""
import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from latentee.engines.model.spec import ModelSpec
from latentee.errors import BadParam

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SubjectData:
    """
    One subject: surrogates x (NaN where missing, mask True where observed),
    subject covariates w, occasion covariates z (n_i x q) and outcomes y.
    """
    id: str
    x: np.ndarray
    mask: np.ndarray
    w: np.ndarray
    z: np.ndarray
    y: np.ndarray
    u_true: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        mask = np.array(self.mask, dtype=bool).reshape(-1)
        y = np.array(self.y, dtype=float).reshape(-1)
        z = np.array(self.z, dtype=float)
        w = np.array(self.w, dtype=float).reshape(-1)
        if mask.shape != x.shape:
            raise BadParam(f"subject {self.id}: mask length {mask.size} != surrogate length {x.size}")
        if z.ndim == 1:
            z = z.reshape(len(y), -1) if len(y) else np.zeros((0, 0))
        if z.shape[0] != len(y):
            raise BadParam(f"subject {self.id}: {z.shape[0]} covariate rows for {len(y)} outcomes")
        if np.any(np.isnan(w)):
            raise BadParam(f"subject {self.id}: subject covariates must be complete")
        x = np.where(mask, x, np.nan)
        if np.any(np.isnan(x[mask])):
            raise BadParam(f"subject {self.id}: observed surrogate is NaN")
        for name, value in (("x", x), ("mask", mask), ("w", w), ("z", z), ("y", y)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self.u_true is not None:
            object.__setattr__(self, "u_true", np.array(self.u_true, dtype=float).reshape(-1))

    @property
    def n_i(self) -> int:
        return len(self.y)

    @property
    def pattern(self) -> str:
        return pattern_label(self.mask)


def pattern_label(mask: np.ndarray) -> str:
    """'1' for observed, '0' for missing, in surrogate order"""
    return "".join("1" if m else "0" for m in mask)


@dataclass(frozen=True)
class PatternGroup:
    """Subjects sharing a surrogate missingness pattern"""
    mask: np.ndarray
    index: np.ndarray

    @property
    def label(self) -> str:
        return pattern_label(self.mask)

    @property
    def observed(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


@dataclass(frozen=True)
class OutcomeGroup:
    """Subjects sharing both pattern and occasion count"""
    pattern: PatternGroup
    n: int
    index: np.ndarray
    Y: np.ndarray
    Z: np.ndarray


class Dataset:
    """
    Immutable collection of subjects with stacked arrays and group indices.
    """

    def __init__(self, spec: ModelSpec, subjects: Sequence[SubjectData]):
        self.spec = spec
        self.subjects: Tuple[SubjectData, ...] = tuple(
            s if s.n_i or s.z.shape == (0, spec.q) else replace(s, z=np.zeros((0, spec.q)))
            for s in subjects
        )
        for s in self.subjects:
            if s.x.size != spec.p or s.w.size != spec.r:
                raise BadParam(f"subject {s.id}: expected {spec.p} surrogates and {spec.r} covariates")
            if s.n_i and s.z.shape[1] != spec.q:
                raise BadParam(f"subject {s.id}: expected {spec.q} occasion covariates, got {s.z.shape[1]}")

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def N(self) -> int:
        return len(self.subjects)

    @cached_property
    def X(self) -> np.ndarray:
        return np.array([s.x for s in self.subjects]).reshape(self.N, self.spec.p)

    @cached_property
    def M(self) -> np.ndarray:
        return np.array([s.mask for s in self.subjects], dtype=bool).reshape(self.N, self.spec.p)

    @cached_property
    def W(self) -> np.ndarray:
        return np.array([s.w for s in self.subjects]).reshape(self.N, self.spec.r)

    @cached_property
    def n_i(self) -> np.ndarray:
        return np.array([s.n_i for s in self.subjects], dtype=int)

    @cached_property
    def ids(self) -> List[str]:
        return [s.id for s in self.subjects]

    @cached_property
    def patterns(self) -> List[PatternGroup]:
        """Pattern groups in order of first appearance"""
        groups: Dict[bytes, List[int]] = {}
        masks: Dict[bytes, np.ndarray] = {}
        for i, row in enumerate(self.M):
            key = row.tobytes()
            groups.setdefault(key, []).append(i)
            masks.setdefault(key, row.copy())
        return [PatternGroup(mask=masks[k], index=np.array(v, dtype=int)) for k, v in groups.items()]

    @cached_property
    def pattern_of(self) -> np.ndarray:
        """Pattern group position of each subject"""
        out = np.empty(self.N, dtype=int)
        for g, group in enumerate(self.patterns):
            out[group.index] = g
        return out

    @cached_property
    def outcome_groups(self) -> List[OutcomeGroup]:
        """(pattern, n_i) groups for subjects with at least one occasion"""
        result = []
        for group in self.patterns:
            sizes = self.n_i[group.index]
            for n in sorted(set(sizes.tolist())):
                if n == 0:
                    continue
                idx = group.index[sizes == n]
                Y = np.array([self.subjects[i].y for i in idx]).reshape(len(idx), n)
                Z = np.array([self.subjects[i].z for i in idx]).reshape(len(idx), n, self.spec.q)
                result.append(OutcomeGroup(pattern=group, n=n, index=idx, Y=Y, Z=Z))
        return result

    @property
    def pattern_counts(self) -> Dict[str, int]:
        return {g.label: int(g.index.size) for g in self.patterns}

    @property
    def u_true(self) -> Optional[np.ndarray]:
        if any(s.u_true is None for s in self.subjects):
            return None
        return np.array([s.u_true for s in self.subjects])

    def subset(self, index: Sequence[int]) -> "Dataset":
        return Dataset(self.spec, [self.subjects[i] for i in index])

    def with_spec(self, spec: ModelSpec) -> "Dataset":
        return Dataset(spec, self.subjects)
