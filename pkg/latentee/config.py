"""
Configuration settings for LatentEE
"""
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Literal
import os


class Settings(BaseSettings):
    """Application settings"""

    model_config = SettingsConfigDict(
        env_prefix="LATENTEE_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # API Settings
    api_title: str = "LatentEE API"
    api_host: str = "0.0.0.0"
    api_port: int = 8000

    # Paths
    base_dir: str = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    configs_dir: str = os.path.join(base_dir, "configs")
    runs_dir: str = os.path.join(base_dir, "runs")

    # Quasi-Newton driver (exposure and joint likelihood)
    grad_tol: float = 1e-6
    rel_obj_tol: float = 1e-10
    max_iter: int = 500
    gradient: Literal["analytic", "numeric"] = "analytic"
    fd_step: float = 1e-5  # unconstrained-scale step for numeric gradients

    # Estimating equations
    ee_tol: float = 1e-8
    ee_max_outer: int = 200
    ee1_damping: float = 0.5
    theta2_tol: float = 1e-8
    theta2_max_iter: int = 100
    max_halvings: int = 50

    # Linear algebra
    rcond_min: float = 1e-12
    resolvent_cond_max: float = 1e12
    identifiability_tol: float = 1e-7

    # Sandwich Jacobian
    jac_step: float = 1e-6
    jac_agreement_tol: float = 1e-3

    # Simulation
    workers: int = 1
    max_failure_fraction: float = 0.05


settings = Settings()
