"""
Simulation Schemas - study designs and results
"""
import hashlib
import json
from enum import Enum
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class DesignKind(str, Enum):
    """Study families"""
    BIAS = "bias"
    EFFICIENCY = "efficiency"
    VARRATIO = "varratio"


class MissingScenario(str, Enum):
    """
    Probability over the nested patterns 'first k surrogates observed'.
    """
    COMPLETE = "complete"
    UNIFORM = "uniform"
    VAR_PROPORTIONAL = "var-proportional"
    VAR_INVERSE = "var-inverse"


class SimDesign(BaseModel):
    """
    One-latent longitudinal simulation design.

    Truth: U ~ N(0, var_u); X_j = lambda_j U + delta_j with
    var(delta_j) / var(X_j) = me_fraction; Y_it = beta0 + beta U +
    kappa * time_t + eps_it with eps from `true_cov`.
    """
    model_config = ConfigDict(extra="forbid")

    kind: DesignKind
    n: int = Field(500, gt=1)
    reps: int = Field(200, gt=1)
    seed: int = 20240611

    # exposure model
    p: int = Field(3, ge=2)
    loadings: Optional[List[float]] = None
    var_u: float = Field(1.0, gt=0)
    me_fractions: List[float] = Field(default_factory=lambda: [0.22])
    missing: List[MissingScenario] = Field(default_factory=lambda: [MissingScenario.COMPLETE])

    # outcome model
    occasions: int = Field(4, ge=1)
    beta0: float = 0.0
    kappa: float = 0.5
    betas: List[float] = Field(default_factory=lambda: [1.0])
    standardized: bool = False
    outcome_noise: float = Field(4.0, gt=0)
    true_cov: Literal["har1", "cs", "ar1"] = "har1"
    true_sd_profile: Optional[List[float]] = None
    rhos: List[float] = Field(default_factory=lambda: [0.5])

    # fitting
    fit_covs: List[Literal["independence", "cs", "ar1", "har1", "unstructured"]] = Field(
        default_factory=lambda: ["cs"])
    methods: List[Literal["mle", "ee1", "ee2", "rc"]] = Field(default_factory=lambda: ["mle", "ee1", "rc"])
    beta_stars: List[float] = Field(default_factory=list)
    expected_n: int = Field(20000, gt=1)

    @model_validator(mode="after")
    def _check(self) -> "SimDesign":
        if self.loadings is not None and len(self.loadings) != self.p:
            raise ValueError(f"loadings has {len(self.loadings)} entries for p={self.p}")
        if self.loadings is not None and self.loadings[0] != 1.0:
            raise ValueError("the first loading fixes the latent scale and must be 1")
        for f in self.me_fractions:
            if not 0 <= f < 1:
                raise ValueError(f"measurement-error fraction {f} outside [0, 1)")
        for rho in self.rhos:
            if not -1 < rho < 1:
                raise ValueError(f"correlation {rho} outside (-1, 1)")
        if self.true_sd_profile is not None and len(self.true_sd_profile) != self.occasions:
            raise ValueError("true_sd_profile needs one entry per occasion")
        if "ee2" in self.methods and not self.beta_stars:
            raise ValueError("method ee2 requires beta_stars")
        return self

    @property
    def lambdas(self) -> List[float]:
        return self.loadings or [1.0] * self.p

    def design_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class CellFailure(BaseModel):
    cell: Dict[str, Any]
    replicate: int
    method: str
    error: str


class SimResult(BaseModel):
    """Per-cell aggregates of one experiment"""
    design: SimDesign
    cells: List[Dict[str, Any]] = Field(default_factory=list)
    failures: List[CellFailure] = Field(default_factory=list)
    version: str = ""
