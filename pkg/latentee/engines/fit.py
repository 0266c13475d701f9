"""
End-to-end fitting for one estimator: exposure model, outcome model, variance
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from latentee.engines.exposure import ExposureFit, fit_exposure_mle
from latentee.engines.inference import SandwichResult, sandwich_parts, sandwich_var
from latentee.engines.joint import JointFit, fit_joint_mle
from latentee.engines.model.data import Dataset
from latentee.engines.model.params import ParamVector
from latentee.engines.model.spec import ModelSpec
from latentee.engines.moments import ExposureModel, ExposureState
from latentee.engines.outcome import OutcomeFit, Scheme, fit_outcome_ee
from latentee.errors import BadParam

logger = logging.getLogger(__name__)

METHODS = ("mle", "ee1", "ee2", "rc")


def scheme_for(method: str, beta_star: Optional[Sequence[float]] = None) -> Optional[Scheme]:
    """Scheme for an EE method; None for mle"""
    if method not in METHODS:
        raise BadParam(f"unknown method '{method}'")
    if method == "mle":
        return None
    if method == "ee1":
        return Scheme.ee1()
    if method == "rc":
        return Scheme.rc()
    return Scheme.ee2(beta_star) if beta_star is not None else Scheme(method)


@dataclass
class ModelFit:
    """A completed fit with its covariance; covariance is None when unavailable"""
    spec: ModelSpec
    dataset: Dataset
    method: str
    scheme: Optional[Scheme]
    params: ParamVector
    converged: bool
    iterations: int
    norm: float
    loglik: Optional[float]
    covariance: Optional[np.ndarray]
    sandwich: Optional[SandwichResult] = None
    exposure: Optional[ExposureFit] = None
    outcome: Optional[OutcomeFit] = None
    joint: Optional[JointFit] = None

    def state(self) -> ExposureState:
        return ExposureModel(self.spec, self.params.theta3).bind(self.dataset)


def fit_model(spec: ModelSpec, dataset: Dataset, method: str,
              beta_star: Optional[Sequence[float]] = None) -> ModelFit:
    """
    Fit the model by joint MLE or by one of the estimating-equation schemes.

    EE fits get the full sandwich covariance and its decomposition; the
    joint MLE gets the inverse observed information.

    Raises:
        BadParam: unknown method, or ee2 without beta*
        NotConverged, Unidentified, Singular: propagated from the engines
    """
    scheme = scheme_for(method, beta_star)
    if scheme is not None and len(scheme.beta_star or ()) not in (0, len(spec.outcome_latents)):
        raise BadParam(f"beta* needs {len(spec.outcome_latents)} value(s), got {len(scheme.beta_star)}")

    exposure = fit_exposure_mle(spec, dataset)
    rc = fit_outcome_ee(spec, dataset, exposure.theta3_hat, Scheme.rc()) if scheme is None else None
    if scheme is None:
        start = ParamVector(spec, rc.theta1_hat, rc.theta2_hat, exposure.theta3_hat)
        joint = fit_joint_mle(spec, dataset, init=start)
        logger.info(f"Joint MLE finished: loglik={joint.loglik:.6f}, score norm={joint.score_norm:.2e}")
        return ModelFit(
            spec=spec, dataset=dataset, method=method, scheme=None, params=joint.params,
            converged=joint.converged, iterations=joint.iterations, norm=joint.score_norm,
            loglik=joint.loglik, covariance=joint.covariance, exposure=exposure, joint=joint,
        )

    outcome = fit_outcome_ee(spec, dataset, exposure.theta3_hat, scheme)
    params = ParamVector(spec, outcome.theta1_hat, outcome.theta2_hat, exposure.theta3_hat)
    result = sandwich_var(sandwich_parts(spec, dataset, params, scheme))
    logger.info(f"{scheme.label} fit finished: beta={params.beta}, "
                f"decomposition error={result.decomposition_error:.2e}")
    return ModelFit(
        spec=spec, dataset=dataset, method=method, scheme=scheme, params=params,
        converged=exposure.converged and outcome.converged,
        iterations=exposure.iterations + outcome.iterations, norm=outcome.ee_norm,
        loglik=exposure.loglik, covariance=result.full, sandwich=result,
        exposure=exposure, outcome=outcome,
    )
