"""
Small models and datasets shared by the unit tests
"""
from typing import Optional

import numpy as np

from latentee.engines.model.data import Dataset, SubjectData
from latentee.engines.model.params import ParamVector
from latentee.engines.model.spec import FREE, CovKind, CovStructure, ModelSpec
from latentee.engines.simulation.generator import simulate_dataset


def one_latent_spec(outcome: CovStructure = CovStructure(CovKind.CS)) -> ModelSpec:
    """u measured by x1..x3 with an item bias of w on x3; outcome on u and t"""
    return ModelSpec(
        latents=("u",),
        surrogates=("x1", "x2", "x3"),
        subject_covariates=("w",),
        occasion_covariates=("t",),
        lambda_pattern=[[1.0], [FREE], [FREE]],
        nu_pattern=[0.0, FREE, FREE],
        k_pattern=[[0.0], [0.0], [FREE]],
        alpha_pattern=[FREE],
        gamma1_pattern=[[0.0]],
        gamma2_pattern=[[FREE]],
        delta_cov=CovStructure(CovKind.BLOCKED, dim=3),
        psi_cov=CovStructure(CovKind.DIAGONAL, dim=1),
        outcome_cov=outcome,
        outcome_latents=(0,),
        name="one-latent",
    )


ONE_LATENT_THETA3 = [0.5, -0.3, 0.8, 1.2, 0.4, 1.0, 0.6, 0.5, 0.4, 0.6, 1.5]
ONE_LATENT_THETA1 = [2.0, -0.7, 0.3]


def one_latent_params(spec: Optional[ModelSpec] = None, theta2=(1.0, 0.5)) -> ParamVector:
    spec = spec or one_latent_spec()
    return ParamVector(spec, ONE_LATENT_THETA1, list(theta2), ONE_LATENT_THETA3)


def two_latent_spec(outcome: CovStructure = CovStructure(CovKind.AR1)) -> ModelSpec:
    """u2 regressed on u1; x4 and x5 share an AR(1) error block"""
    return ModelSpec(
        latents=("u1", "u2"),
        surrogates=("x1", "x2", "x3", "x4", "x5"),
        subject_covariates=("w",),
        occasion_covariates=("t",),
        lambda_pattern=[[1.0, 0.0], [FREE, 0.0], [0.0, 1.0], [0.0, FREE], [0.0, FREE]],
        nu_pattern=[0.0, FREE, 0.0, FREE, FREE],
        k_pattern=np.zeros((5, 1)),
        alpha_pattern=[FREE, FREE],
        gamma1_pattern=[[0.0, 0.0], [FREE, 0.0]],
        gamma2_pattern=[[FREE], [0.0]],
        delta_cov=CovStructure(CovKind.BLOCKED, dim=5, blocks=((3, 4),)),
        psi_cov=CovStructure(CovKind.UNSTRUCTURED, dim=2),
        outcome_cov=outcome,
        outcome_latents=(0, 1),
        name="two-latent",
    )


TWO_LATENT_THETA3 = [
    0.2, -0.4, 0.1,          # nu
    0.9, 1.1, 0.7,           # lambda
    0.5, -0.2,               # alpha
    0.4,                     # gamma1[u2,u1]
    0.3,                     # gamma2[u1,w]
    0.5, 0.6, 0.4, 0.5, 0.3,  # error variances
    0.4,                     # block correlation
    1.0, 0.3, 0.8,           # psi vech
]
TWO_LATENT_THETA1 = [1.0, -0.5, 0.8, 0.2]


def two_latent_params(spec: Optional[ModelSpec] = None, theta2=(1.2, 0.4)) -> ParamVector:
    spec = spec or two_latent_spec()
    return ParamVector(spec, TWO_LATENT_THETA1, list(theta2), TWO_LATENT_THETA3)


def mixed_masks(p: int):
    """Complete, one-missing-at-a-time and first-only patterns"""
    masks = [np.ones(p, dtype=bool)]
    for j in range(1, p):
        m = np.ones(p, dtype=bool)
        m[j] = False
        masks.append(m)
    first = np.zeros(p, dtype=bool)
    first[0] = True
    masks.append(first)
    return masks


def simulated(params: ParamVector, n: int = 60, occasions: int = 4, seed: int = 7,
              missing: bool = True, ragged: bool = True) -> Dataset:
    """Dataset drawn at params with mixed patterns and unequal occasion counts"""
    rng = np.random.default_rng(seed)
    masks = mixed_masks(params.spec.p) if missing else None
    probs = np.full(len(masks), 1.0 / len(masks)) if missing else None
    dataset = simulate_dataset(params, n, occasions, rng, probs, masks)
    if not ragged:
        return dataset
    subjects = []
    for i, s in enumerate(dataset.subjects):
        keep = occasions - (i % occasions) if occasions > 1 else 1
        subjects.append(SubjectData(id=s.id, x=s.x, mask=s.mask, w=s.w, z=s.z[:keep], y=s.y[:keep],
                                    u_true=s.u_true))
    return Dataset(params.spec, subjects)
