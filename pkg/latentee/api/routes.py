"""
API routes for model validation, fitting and simulation
"""
from fastapi import APIRouter, HTTPException
from typing import Any
import logging
import math

import pandas as pd

from latentee.engines.fit import fit_model
from latentee.engines.io.loader import ID_COLUMN, OCCASION_COLUMN, build_dataset
from latentee.engines.io.report import FitResult, build_fit_result
from latentee.engines.simulation.runner import run_experiment
from latentee.errors import InternalError, LatentEEError
from latentee.schemas import (
    FitRequest, SimulateRequest, SimulateResponse,
    ValidateRequest, ValidateResponse
)

logger = logging.getLogger(__name__)

router = APIRouter()


def _http_error(e: LatentEEError) -> HTTPException:
    """400 for bad input, 422 for fits that fail to converge or identify, 500 otherwise"""
    if e.kind == "internal":
        status = 500
    else:
        status = 400 if e.kind in ("parse", "usage") else 422
    return HTTPException(status_code=status, detail=e.to_dict())


def _clean(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    return value


@router.post("/model/validate")
async def validate_model(request: ValidateRequest) -> ValidateResponse:
    """Validate a model configuration and report its parameter order"""
    try:
        spec = request.config.to_spec(request.outcome_cov)
    except LatentEEError as e:
        logger.error(f"Model validation failed: {e.message}")
        raise _http_error(e)
    except Exception as e:
        logger.exception("Model validation failed unexpectedly")
        raise _http_error(InternalError.wrap(e))
    layout = spec.layout
    return ValidateResponse(
        valid=True,
        name=spec.name,
        config_hash=request.config.config_hash(),
        counts={"theta1": layout.k1, "theta2": layout.k2, "theta3": layout.k3},
        parameters=layout.names,
    )


@router.post("/fit")
def fit(request: FitRequest) -> FitResult:
    """Fit inline subject and outcome records"""
    config = request.config
    method = request.method or config.outcome.method
    beta_star = request.beta_star if request.beta_star is not None else config.outcome.beta_star
    if method == "ee2" and not beta_star:
        raise HTTPException(status_code=400, detail="method ee2 requires beta_star")
    try:
        spec = config.to_spec(request.outcome_cov)
        columns = [ID_COLUMN, OCCASION_COLUMN, config.outcome.response, *spec.occasion_covariates]
        subjects = pd.DataFrame(request.subjects)
        outcomes = pd.DataFrame(request.outcomes, columns=None if request.outcomes else columns)
        dataset = build_dataset(subjects, outcomes, config, spec)
        result = fit_model(spec, dataset, method, beta_star if method == "ee2" else None)
    except LatentEEError as e:
        logger.error(f"Fit failed: {e.message}")
        raise _http_error(e)
    except Exception as e:
        logger.exception("Fit failed unexpectedly")
        raise _http_error(InternalError.wrap(e))
    return build_fit_result(result, config=config.model_dump(mode="json"), config_hash=config.config_hash())


@router.post("/simulate")
def simulate(request: SimulateRequest) -> SimulateResponse:
    """Run a simulation experiment and return its per-cell rows"""
    try:
        result = run_experiment(request.design)
    except LatentEEError as e:
        logger.error(f"Simulation failed: {e.message}")
        raise _http_error(e)
    except Exception as e:
        logger.exception("Simulation failed unexpectedly")
        raise _http_error(InternalError.wrap(e))
    return SimulateResponse(
        kind=request.design.kind.value,
        design_hash=request.design.design_hash(),
        version=result.version,
        cells=[_clean(row) for row in result.cells],
        n_failures=len(result.failures),
    )
