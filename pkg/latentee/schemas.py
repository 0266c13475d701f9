"""
Schema definitions for API requests/responses
"""
from pydantic import BaseModel, Field
from typing import Optional, List, Dict, Any, Literal

from latentee.engines.io.config import ModelConfig, OUTCOME_STRUCTURES
from latentee.engines.simulation.schemas import SimDesign


class ValidateRequest(BaseModel):
    """Request schema for model validation"""
    config: ModelConfig
    outcome_cov: Optional[Literal[OUTCOME_STRUCTURES]] = None


class ValidateResponse(BaseModel):
    """Validation result with the parameter packing order"""
    valid: bool
    name: str
    config_hash: str
    counts: Dict[str, int]
    parameters: List[str]


class FitRequest(BaseModel):
    """Request schema for fitting inline records"""
    config: ModelConfig
    subjects: List[Dict[str, Any]]
    outcomes: List[Dict[str, Any]] = Field(default_factory=list)
    method: Optional[Literal["mle", "ee1", "ee2", "rc"]] = None
    beta_star: Optional[List[float]] = None
    outcome_cov: Optional[Literal[OUTCOME_STRUCTURES]] = None


class SimulateRequest(BaseModel):
    """Request schema for a simulation experiment"""
    design: SimDesign


class SimulateResponse(BaseModel):
    """Per-cell results of a simulation experiment"""
    kind: str
    design_hash: str
    version: str
    cells: List[Dict[str, Any]]
    n_failures: int
