"""
Model core - specification, parameters, covariance builders, data containers
"""
from latentee.engines.model.covariance import build_cov
from latentee.engines.model.data import Dataset, SubjectData
from latentee.engines.model.params import (
    ExposureMatrices,
    ParamLayout,
    ParamVector,
    from_unconstrained,
    pack_params,
    to_unconstrained,
    unpack_params,
)
from latentee.engines.model.spec import FREE, CovKind, CovStructure, ModelSpec, validate_spec

__all__ = [
    "FREE", "CovKind", "CovStructure", "ModelSpec", "validate_spec", "build_cov",
    "ParamLayout", "ParamVector", "ExposureMatrices", "pack_params", "unpack_params",
    "to_unconstrained", "from_unconstrained", "Dataset", "SubjectData",
]
