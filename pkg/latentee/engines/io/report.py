"""
Fit reports - JSON document, text table and factor-score file
"""
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from latentee import __version__
from latentee.engines.fit import ModelFit
from latentee.engines.inference import wald_report
from latentee.engines.model.data import pattern_label
from latentee.errors import ParseError

logger = logging.getLogger(__name__)


def _finite(value) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _matrix(mat: Optional[np.ndarray]) -> Optional[List[List[Optional[float]]]]:
    """Nested lists with null for entries of parameters held fixed"""
    if mat is None:
        return None
    return [[_finite(v) for v in row] for row in np.asarray(mat)]


class ParameterRow(BaseModel):
    """One reported parameter; inference fields are null without a covariance"""
    name: str
    block: str
    estimate: float
    se: Optional[float] = None
    z: Optional[float] = None
    p_two_sided: Optional[float] = None
    p_one_sided: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None


class VarianceTerms(BaseModel):
    """Decomposition of var(theta1): naive + correction + cross"""
    names: List[str]
    naive: List[List[float]]
    correction: List[List[float]]
    cross: List[List[float]]
    decomposition_error: float


class FitResult(BaseModel):
    """Self-describing fit report"""
    tool: str = "latentee"
    version: str = __version__
    model: str
    method: str
    beta_star: Optional[List[float]] = None
    outcome_covariance: str
    n_subjects: int
    pattern_counts: Dict[str, int] = Field(default_factory=dict)
    converged: bool
    iterations: int
    norm: Optional[float] = None
    loglik: Optional[float] = None
    parameters: List[ParameterRow]
    covariance: Optional[List[List[Optional[float]]]] = None
    variance_terms: Optional[VarianceTerms] = None
    seed: Optional[int] = None
    deterministic: bool = False
    config_hash: Optional[str] = None
    config: Optional[Dict[str, Any]] = None

    def parameter(self, name: str) -> ParameterRow:
        for row in self.parameters:
            if row.name == name:
                return row
        raise KeyError(name)


def build_fit_result(fit: ModelFit, cov: Optional[np.ndarray] = None, config: Optional[Dict[str, Any]] = None,
                     config_hash: Optional[str] = None, seed: Optional[int] = None,
                     deterministic: bool = False) -> FitResult:
    """
    Assemble the report of a fit.

    Args:
        fit: Completed fit
        cov: Covariance override; the fit's own covariance when omitted.
            A fit that did not converge reports no inference.
    """
    layout = fit.spec.layout
    cov = fit.covariance if cov is None else cov
    if not fit.converged:
        cov = None
    blocks = ["theta1"] * layout.k1 + ["theta2"] * layout.k2 + ["theta3"] * layout.k3
    wald = wald_report(layout.names, fit.params.values, cov)
    rows = [
        ParameterRow(
            name=r.name, block=block, estimate=r.estimate, se=_finite(r.se), z=_finite(r.z),
            p_two_sided=_finite(r.p_two_sided), p_one_sided=_finite(r.p_one_sided),
            ci_low=_finite(r.ci_low), ci_high=_finite(r.ci_high),
        )
        for r, block in zip(wald.rows, blocks)
    ]
    terms = None
    if fit.sandwich is not None and cov is not None:
        parts = fit.sandwich.theta1_terms()
        terms = VarianceTerms(
            names=layout.theta1_names,
            naive=_matrix(parts["naive"]),
            correction=_matrix(parts["correction"]),
            cross=_matrix(parts["cross"]),
            decomposition_error=fit.sandwich.decomposition_error,
        )
    return FitResult(
        model=fit.spec.name,
        method=fit.method,
        beta_star=list(fit.scheme.beta_star) if fit.scheme is not None and fit.scheme.beta_star else None,
        outcome_covariance=fit.spec.outcome_cov.kind.value,
        n_subjects=fit.dataset.N,
        pattern_counts=fit.dataset.pattern_counts,
        converged=fit.converged,
        iterations=fit.iterations,
        norm=_finite(fit.norm),
        loglik=_finite(fit.loglik),
        parameters=rows,
        covariance=_matrix(cov),
        variance_terms=terms,
        seed=seed,
        deterministic=deterministic,
        config_hash=config_hash,
        config=config,
    )


def _fmt(value: Optional[float], width: int = 10) -> str:
    return f"{value:>{width}.4f}" if value is not None else f"{'-':>{width}}"


def render_table(result: FitResult, blocks: Tuple[str, ...] = ("theta1", "theta2")) -> str:
    """Human-readable table: estimate, s.e., p-value and 95% CI at 4 decimals"""
    lines = [
        f"{result.model}: {result.method}"
        + (f" (beta*={','.join(f'{b:g}' for b in result.beta_star)})" if result.beta_star else "")
        + f", outcome covariance {result.outcome_covariance}",
        f"N={result.n_subjects}  converged={result.converged}  iterations={result.iterations}",
        "",
        f"{'parameter':<28}{'estimate':>10}{'s.e.':>10}{'p-value':>10}   95% CI",
    ]
    for row in result.parameters:
        if row.block not in blocks:
            continue
        ci = f"({row.ci_low:.4f}, {row.ci_high:.4f})" if row.ci_low is not None else "-"
        lines.append(f"{row.name:<28}{_fmt(row.estimate)}{_fmt(row.se)}{_fmt(row.p_two_sided)}   {ci}")
    lines.append("")
    lines.append("full precision:")
    for row in result.parameters:
        if row.block in blocks:
            lines.append(f"  {row.name} = {row.estimate!r}" + (f" (se {row.se!r})" if row.se is not None else ""))
    return "\n".join(lines) + "\n"


def scores_frame(fit: ModelFit) -> pd.DataFrame:
    """Per-subject EB factor scores and diag of their conditional covariance"""
    state = fit.state()
    dataset = fit.dataset
    frame = pd.DataFrame({"id": dataset.ids})
    frame["pattern"] = [pattern_label(m) for m in dataset.M]
    for k, name in enumerate(fit.spec.latents):
        frame[f"u_tilde[{name}]"] = state.u_tilde[:, k]
    for k, name in enumerate(fit.spec.latents):
        frame[f"psi_tilde[{name}]"] = [state.psi_tilde_of(i)[k, k] for i in range(dataset.N)]
    return frame


def write_report(result: FitResult, prefix: Union[str, Path], fit: Optional[ModelFit] = None) -> Dict[str, Path]:
    """
    Write PREFIX.report.json and PREFIX.report.txt, plus PREFIX.scores.csv
    when the fit is given.
    """
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": prefix.with_name(prefix.name + ".report.json"),
        "text": prefix.with_name(prefix.name + ".report.txt"),
    }
    paths["json"].write_text(result.model_dump_json(indent=2), encoding="utf-8")
    paths["text"].write_text(render_table(result), encoding="utf-8")
    if fit is not None:
        paths["scores"] = prefix.with_name(prefix.name + ".scores.csv")
        scores_frame(fit).to_csv(paths["scores"], index=False, float_format="%.17g")
    logger.info(f"Wrote report {paths['json']}")
    return paths


def load_report(path: Union[str, Path]) -> FitResult:
    path = Path(path)
    if not path.exists():
        raise ParseError("report not found", path=str(path))
    try:
        return FitResult.model_validate_json(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise ParseError(f"invalid report: {e}", path=str(path))
