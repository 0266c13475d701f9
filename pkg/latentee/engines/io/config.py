"""
Model configuration - YAML documents describing a latent exposure model
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from latentee.engines.model.spec import FREE, CovKind, CovStructure, ModelSpec, validate_spec
from latentee.errors import ParseError, SpecError

logger = logging.getLogger(__name__)

# A number fixes the entry; "free" makes it a parameter.
FixedOrFree = Union[float, Literal["free"]]

OUTCOME_STRUCTURES = ("independence", "diagonal", "cs", "csh", "ar1", "har1", "unstructured")


def _entry(value: FixedOrFree) -> float:
    return FREE if value == "free" else float(value)


class SurrogateConfig(BaseModel):
    """One error-prone measurement and its latent parents"""
    model_config = ConfigDict(extra="forbid")

    name: str
    loadings: Dict[str, FixedOrFree]
    intercept: FixedOrFree = "free"
    item_bias: List[str] = Field(default_factory=list)
    error_variance: FixedOrFree = "free"


class LatentConfig(BaseModel):
    """Latent variable and its structural regression"""
    model_config = ConfigDict(extra="forbid")

    name: str
    intercept: FixedOrFree = "free"
    on_latents: List[str] = Field(default_factory=list)
    on_covariates: List[str] = Field(default_factory=list)


class CovarianceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    structure: Literal[OUTCOME_STRUCTURES] = "cs"
    occasions: Optional[int] = None


class OutcomeConfig(BaseModel):
    """Longitudinal outcome regression"""
    model_config = ConfigDict(extra="forbid")

    response: str = "y"
    latents: List[str]
    covariates: List[str] = Field(default_factory=list)
    covariance: CovarianceConfig = Field(default_factory=CovarianceConfig)
    method: Literal["mle", "ee1", "ee2", "rc"] = "ee1"
    beta_star: Optional[List[float]] = None


class ModelConfig(BaseModel):
    """
    Declarative model configuration.
    Can be written in YAML or JSON; unknown keys are rejected.
    """
    model_config = ConfigDict(extra="forbid")

    name: str = "model"
    description: str = ""
    subject_covariates: List[str] = Field(default_factory=list)
    latents: List[LatentConfig]
    surrogates: List[SurrogateConfig]
    ar1_blocks: List[List[str]] = Field(default_factory=list)
    latent_covariance: Literal["unstructured", "diagonal"] = "unstructured"
    outcome: OutcomeConfig

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_spec(self, outcome_structure: Optional[str] = None) -> ModelSpec:
        """
        Build and validate the ModelSpec.

        Args:
            outcome_structure: Overrides the configured outcome covariance

        Raises:
            SpecError: unknown names or identifiability violations
        """
        latents = [lat.name for lat in self.latents]
        surrogates = [s.name for s in self.surrogates]
        covariates = list(self.subject_covariates)
        occasion = list(self.outcome.covariates)
        lat_ix = {n: k for k, n in enumerate(latents)}
        sur_ix = {n: k for k, n in enumerate(surrogates)}
        cov_ix = {n: k for k, n in enumerate(covariates)}
        p, l, r = len(surrogates), len(latents), len(covariates)
        errors = []

        def lookup(table, name, what, where):
            if name not in table:
                errors.append(f"{where}: unknown {what} '{name}'")
                return None
            return table[name]

        lam = np.zeros((p, l))
        nu = np.zeros(p)
        K = np.zeros((p, r))
        fixed_delta = []
        for j, s in enumerate(self.surrogates):
            for latent, value in s.loadings.items():
                k = lookup(lat_ix, latent, "latent", f"surrogate '{s.name}'")
                if k is not None:
                    lam[j, k] = _entry(value)
            nu[j] = _entry(s.intercept)
            for cov in s.item_bias:
                k = lookup(cov_ix, cov, "subject covariate", f"surrogate '{s.name}' item_bias")
                if k is not None:
                    K[j, k] = FREE
            if s.error_variance != "free":
                fixed_delta.append((j, float(s.error_variance)))

        alpha = np.zeros(l)
        gamma1 = np.zeros((l, l))
        gamma2 = np.zeros((l, r))
        for k, lat in enumerate(self.latents):
            alpha[k] = _entry(lat.intercept)
            for other in lat.on_latents:
                m = lookup(lat_ix, other, "latent", f"latent '{lat.name}'")
                if m is not None:
                    gamma1[k, m] = FREE
            for cov in lat.on_covariates:
                m = lookup(cov_ix, cov, "subject covariate", f"latent '{lat.name}'")
                if m is not None:
                    gamma2[k, m] = FREE

        blocks = []
        for block in self.ar1_blocks:
            idx = [lookup(sur_ix, n, "surrogate", "ar1_blocks") for n in block]
            if None not in idx:
                blocks.append(tuple(idx))
        selected = [lookup(lat_ix, n, "latent", "outcome") for n in self.outcome.latents]

        if errors:
            raise SpecError(errors)

        structure = outcome_structure or self.outcome.covariance.structure
        if structure not in OUTCOME_STRUCTURES:
            raise SpecError([f"unknown outcome covariance structure '{structure}'"])
        spec = ModelSpec(
            latents=latents,
            surrogates=surrogates,
            subject_covariates=covariates,
            occasion_covariates=occasion,
            lambda_pattern=lam,
            nu_pattern=nu,
            k_pattern=K,
            alpha_pattern=alpha,
            gamma1_pattern=gamma1,
            gamma2_pattern=gamma2,
            delta_cov=CovStructure(CovKind.BLOCKED, dim=p, fixed=tuple(fixed_delta), blocks=tuple(blocks)),
            psi_cov=CovStructure(CovKind(self.latent_covariance), dim=l),
            outcome_cov=CovStructure(CovKind(structure), dim=self.outcome.covariance.occasions),
            outcome_latents=tuple(selected),
            name=self.name,
        )
        return validate_spec(spec)


class ModelConfigLoader:
    """
    Load model configurations from YAML or JSON files.
    Validates against the ModelConfig schema.
    """

    def load(self, config_path: Union[str, Path]) -> ModelConfig:
        """
        Load a model configuration from file.

        Args:
            config_path: Path to YAML or JSON file

        Returns:
            Validated ModelConfig object

        Raises:
            ParseError: unreadable file, malformed document or schema violation
        """
        config_path = Path(config_path)
        if not config_path.exists():
            raise ParseError("model configuration not found", path=str(config_path))
        logger.info(f"Loading model configuration: {config_path}")
        text = config_path.read_text(encoding="utf-8")
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            raise ParseError(f"malformed document: {getattr(e, 'problem', e)}", path=str(config_path),
                             line=mark.line + 1 if mark else None)
        return self.load_from_dict(data, source=str(config_path))

    def load_from_dict(self, data: Any, source: Optional[str] = None) -> ModelConfig:
        """
        Validate a configuration dictionary.

        Raises:
            ParseError: naming the first offending key
        """
        if not isinstance(data, dict):
            raise ParseError("configuration must be a mapping", path=source)
        try:
            config = ModelConfig(**data)
        except ValidationError as e:
            first = e.errors()[0]
            location = ".".join(str(part) for part in first["loc"])
            logger.error(f"Failed to validate model configuration: {e}")
            raise ParseError(f"{first['msg']}", path=source, column=location)
        logger.info(f"Successfully loaded model configuration: {config.name}")
        return config

    def dump(self, config: ModelConfig, path: Union[str, Path]):
        """Write a configuration as YAML"""
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(config.model_dump(mode="json", exclude_defaults=False), f, sort_keys=False)
        logger.info(f"Wrote model configuration: {path}")
