"""
Experiment runners - replicate loops, aggregation and result files
"""
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from latentee import __version__
from latentee.config import settings
from latentee.engines.exposure import fit_exposure_mle
from latentee.engines.inference import Z_975, sandwich_parts, sandwich_var
from latentee.engines.joint import fit_joint_mle
from latentee.engines.model.data import Dataset
from latentee.engines.model.params import ParamVector
from latentee.engines.moments import ExposureModel
from latentee.engines.outcome import Scheme, fit_outcome_ee
from latentee.engines.simulation.generator import (
    SimCell, design_cells, gen_dataset, raw_beta, replicate_rng, simulate_dataset,
    nested_masks, pattern_probabilities, true_params, truth_spec,
)
from latentee.engines.simulation.schemas import CellFailure, DesignKind, SimDesign, SimResult
from latentee.errors import BadDesign, LatentEEError

logger = logging.getLogger(__name__)

BETA_INDEX = 1


def method_labels(design: SimDesign) -> List[str]:
    labels = []
    for method in design.methods:
        if method == "ee2":
            labels.extend(f"ee2({b:g})" for b in design.beta_stars)
        else:
            labels.append(method)
    return labels


def _scheme(label: str) -> Optional[Scheme]:
    if label == "mle":
        return None
    if label == "ee1":
        return Scheme.ee1()
    if label == "rc":
        return Scheme.rc()
    return Scheme.ee2([float(label[4:-1])])


def _fit_one(spec, dataset: Dataset, theta3: np.ndarray, label: str,
             rc_start: Optional[Tuple[np.ndarray, np.ndarray]]) -> Tuple[float, float]:
    """(beta_hat, se) for one estimator on one dataset"""
    scheme = _scheme(label)
    if scheme is None:
        init = ParamVector(spec, rc_start[0], rc_start[1], theta3) if rc_start is not None else None
        fit = fit_joint_mle(spec, dataset, init=init)
        se = np.sqrt(fit.covariance[BETA_INDEX, BETA_INDEX]) if fit.covariance is not None else np.nan
        return float(fit.params.theta1[BETA_INDEX]), float(se)
    fit = fit_outcome_ee(spec, dataset, theta3, scheme)
    params = ParamVector(spec, fit.theta1_hat, fit.theta2_hat, theta3)
    result = sandwich_var(sandwich_parts(spec, dataset, params, scheme))
    return float(fit.theta1_hat[BETA_INDEX]), float(np.sqrt(result.theta1[BETA_INDEX, BETA_INDEX]))


def berkson_covariance(dataset: Dataset, theta3: np.ndarray) -> float:
    """Sample cov(U_tilde, U - U_tilde) of the first latent"""
    u_true = dataset.u_true
    if u_true is None:
        return np.nan
    u_tilde = ExposureModel(dataset.spec, theta3).bind(dataset).u_tilde[:, 0]
    resid = u_true[:, 0] - u_tilde
    return float(np.mean((u_tilde - u_tilde.mean()) * (resid - resid.mean())))


def run_replicate(design: SimDesign, cell: SimCell, replicate: int) -> Tuple[List[dict], List[dict]]:
    """
    Fit every (structure, estimator) pair on one generated dataset.

    Returns:
        (records, failures); a failed exposure fit fails every estimator
    """
    base = {"cell": cell.index, **cell.as_dict(), "replicate": replicate}
    labels = method_labels(design)
    records, failures = [], []
    try:
        dataset = gen_dataset(design, replicate, cell)
        first = truth_spec(design, design.fit_covs[0], cell.me_fraction)
        exposure = fit_exposure_mle(first, dataset.with_spec(first))
    except LatentEEError as e:
        for fit_cov in design.fit_covs:
            for label in labels:
                failures.append({**base, "fit_cov": fit_cov, "method": label, "error": e.kind})
        return records, failures

    theta3 = exposure.theta3_hat
    berkson = berkson_covariance(dataset.with_spec(first), theta3)
    for fit_cov in design.fit_covs:
        spec = truth_spec(design, fit_cov, cell.me_fraction)
        data = dataset.with_spec(spec)
        rc_start = None
        for label in labels:
            try:
                if label == "mle" and rc_start is None:
                    rc = fit_outcome_ee(spec, data, theta3, Scheme.rc())
                    rc_start = (rc.theta1_hat, rc.theta2_hat)
                beta_hat, se = _fit_one(spec, data, theta3, label, rc_start)
            except LatentEEError as e:
                logger.warning(f"cell {cell.index} replicate {replicate}: {label}/{fit_cov} failed ({e.kind})")
                failures.append({**base, "fit_cov": fit_cov, "method": label, "error": e.kind})
                continue
            records.append({**base, "fit_cov": fit_cov, "method": label,
                            "beta_hat": beta_hat, "se": se, "berkson": berkson})
    return records, failures


def _job(args):
    design, cell, replicate = args
    return run_replicate(design, cell, replicate)


def run_replicates(design: SimDesign, cells: List[SimCell]) -> Tuple[pd.DataFrame, List[CellFailure]]:
    """All (cell, replicate) jobs, serially or over a process pool; output order is job order"""
    jobs = [(design, cell, rep) for cell in cells for rep in range(design.reps)]
    logger.info(f"Running {design.kind.value} experiment: {len(cells)} cells x {design.reps} replicates "
                f"on {settings.workers} worker(s)")
    if settings.workers > 1:
        with ProcessPoolExecutor(max_workers=settings.workers) as pool:
            outputs = list(tqdm(pool.map(_job, jobs, chunksize=4), total=len(jobs), desc=design.kind.value))
    else:
        outputs = [_job(job) for job in tqdm(jobs, desc=design.kind.value)]

    records, failures = [], []
    for recs, fails in outputs:
        records.extend(recs)
        for f in fails:
            failures.append(CellFailure(
                cell={k: f[k] for k in ("cell", "beta", "rho", "me_fraction", "missing", "fit_cov")},
                replicate=f["replicate"], method=f["method"], error=f["error"],
            ))
    frame = pd.DataFrame(records, columns=["cell", "beta", "rho", "me_fraction", "missing", "replicate",
                                           "fit_cov", "method", "beta_hat", "se", "berkson"])
    return frame, failures


def _summarize(group: pd.DataFrame, truth: float, n_failed: int, reps: int) -> Dict[str, float]:
    est = group["beta_hat"].to_numpy()
    se = group["se"].to_numpy()
    n_ok = len(est)
    bias = float(np.mean(est - truth)) if n_ok else np.nan
    sd = float(np.std(est, ddof=1)) if n_ok > 1 else np.nan
    covered = np.abs(est - truth) <= Z_975 * se
    berkson = group["berkson"].to_numpy()
    return {
        "beta_true": truth,
        "bias": bias,
        "relative_bias": bias / truth if truth != 0 else np.nan,
        "mc_se": sd / np.sqrt(n_ok) if n_ok > 1 else np.nan,
        "mse": float(np.mean((est - truth) ** 2)) if n_ok else np.nan,
        "variance": sd ** 2 if n_ok > 1 else np.nan,
        "mean_se": float(np.nanmean(se)) if n_ok else np.nan,
        "median_se": float(np.nanmedian(se)) if n_ok else np.nan,
        "coverage": float(np.mean(covered[np.isfinite(se)])) if np.isfinite(se).any() else np.nan,
        "berkson_cov": float(np.mean(berkson)) if n_ok else np.nan,
        "berkson_se": float(np.std(berkson, ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else np.nan,
        "n_ok": n_ok,
        "n_failed": n_failed,
        "valid": n_failed <= settings.max_failure_fraction * reps,
    }


def aggregate(design: SimDesign, cells: List[SimCell], frame: pd.DataFrame,
              failures: List[CellFailure]) -> List[dict]:
    """One row per (cell, fit structure, estimator)"""
    failed = {}
    for f in failures:
        key = (f.cell["cell"], f.cell["fit_cov"], f.method)
        failed[key] = failed.get(key, 0) + 1
    rows = []
    for cell in cells:
        truth = raw_beta(design, cell.beta)
        for fit_cov in design.fit_covs:
            for label in method_labels(design):
                group = frame[(frame["cell"] == cell.index) & (frame["fit_cov"] == fit_cov)
                              & (frame["method"] == label)]
                n_failed = failed.get((cell.index, fit_cov, label), 0)
                row = {"cell": cell.index, **cell.as_dict(), "fit_cov": fit_cov, "method": label,
                       **_summarize(group, truth, n_failed, design.reps)}
                if not row["valid"]:
                    logger.warning(f"cell {cell.index} {label}/{fit_cov}: {n_failed} of {design.reps} "
                                   f"replicates failed; cell invalidated")
                rows.append(row)
    return rows


def variance_ratio(frame: pd.DataFrame, numerator: str, denominator: str) -> Tuple[float, float]:
    """
    Var(num)/Var(den) over replicates where both succeeded, with a
    delta-method Monte Carlo s.e. that accounts for their correlation.
    """
    a = frame[frame["method"] == numerator].set_index("replicate")["beta_hat"]
    b = frame[frame["method"] == denominator].set_index("replicate")["beta_hat"]
    joined = pd.concat([a, b], axis=1, join="inner").dropna()
    R = len(joined)
    if R < 3:
        return np.nan, np.nan
    x, y = joined.iloc[:, 0].to_numpy(), joined.iloc[:, 1].to_numpy()
    ratio = float(np.var(x, ddof=1) / np.var(y, ddof=1))
    rho = float(np.corrcoef(x, y)[0, 1]) if np.std(x) > 0 and np.std(y) > 0 else 0.0
    se = ratio * np.sqrt(max(4.0 * (1.0 - rho ** 2), 0.0) / (R - 1))
    return ratio, float(se)


def expected_efficiency(design: SimDesign, cell: SimCell, fit_cov: str) -> float:
    """
    Asymptotic Var(beta_EE1)/Var(beta_MLE) from A/B matrices averaged over
    one large dataset drawn at the truth.
    """
    if fit_cov != design.true_cov:
        return np.nan
    truth = true_params(design, cell)
    spec = truth_spec(design, fit_cov, cell.me_fraction)
    params = ParamVector(spec, truth.theta1, truth.theta2, truth.theta3)
    rng = replicate_rng(design, cell.index, design.reps)
    big = simulate_dataset(params, design.expected_n, design.occasions, rng,
                           pattern_probabilities(params, cell.missing), nested_masks(design.p))
    try:
        v_ee = sandwich_var(sandwich_parts(spec, big, params, Scheme.ee1())).theta1[BETA_INDEX, BETA_INDEX]
        info = -sandwich_parts(spec, big, params, None).B
        v_mle = np.linalg.inv(0.5 * (info + info.T))[BETA_INDEX, BETA_INDEX] / big.N
    except (LatentEEError, np.linalg.LinAlgError) as e:
        logger.warning(f"expected-information route failed for cell {cell.index}: {e}")
        return np.nan
    return float(v_ee / v_mle)


def _check_kind(design: SimDesign, kind: DesignKind):
    if design.kind != kind:
        raise BadDesign(f"design kind is '{design.kind.value}', expected '{kind.value}'")


def _result(design: SimDesign, rows: List[dict], failures: List[CellFailure]) -> SimResult:
    return SimResult(design=design, cells=rows, failures=failures, version=__version__)


def run_bias_experiment(design: SimDesign) -> SimResult:
    """
    Bias and MSE of each estimator under the (possibly misspecified) fit structures.

    Raises:
        BadDesign: design kind is not 'bias'
    """
    _check_kind(design, DesignKind.BIAS)
    cells = design_cells(design)
    frame, failures = run_replicates(design, cells)
    return _result(design, aggregate(design, cells, frame, failures), failures)


def run_efficiency_experiment(design: SimDesign) -> SimResult:
    """
    Relative efficiency of EE1 against the joint MLE under the correct model.

    The ee1 rows carry the empirical ratio, its MC s.e. and the
    expected-information ratio.
    """
    _check_kind(design, DesignKind.EFFICIENCY)
    for method in ("mle", "ee1"):
        if method not in design.methods:
            raise BadDesign(f"efficiency design needs method '{method}'")
    cells = design_cells(design)
    frame, failures = run_replicates(design, cells)
    rows = aggregate(design, cells, frame, failures)
    for row in rows:
        if row["method"] != "ee1":
            continue
        sub = frame[(frame["cell"] == row["cell"]) & (frame["fit_cov"] == row["fit_cov"])]
        ratio, se = variance_ratio(sub, "ee1", "mle")
        cell = cells[row["cell"]]
        row["efficiency_empirical"] = ratio
        row["efficiency_se"] = se
        row["efficiency_expected"] = expected_efficiency(design, cell, row["fit_cov"])
        logger.info(f"cell {cell.index} ({row['fit_cov']}): Var(EE1)/Var(MLE) = {ratio:.4f} +/- {se:.4f}, "
                    f"expected {row['efficiency_expected']:.4f}")
    return _result(design, rows, failures)


def run_varratio_experiment(design: SimDesign) -> SimResult:
    """
    Var(beta_EE2(beta*))/Var(beta_EE1) over the beta* grid; every row
    carries its ratio against EE1 (the rc row equals the ee2(0) row).
    """
    _check_kind(design, DesignKind.VARRATIO)
    if "ee1" not in design.methods:
        raise BadDesign("varratio design needs method 'ee1'")
    cells = design_cells(design)
    frame, failures = run_replicates(design, cells)
    rows = aggregate(design, cells, frame, failures)
    for row in rows:
        sub = frame[(frame["cell"] == row["cell"]) & (frame["fit_cov"] == row["fit_cov"])]
        row["var_ratio"], row["var_ratio_se"] = variance_ratio(sub, row["method"], "ee1")
    return _result(design, rows, failures)


RUNNERS = {
    DesignKind.BIAS: run_bias_experiment,
    DesignKind.EFFICIENCY: run_efficiency_experiment,
    DesignKind.VARRATIO: run_varratio_experiment,
}


def run_experiment(design: SimDesign) -> SimResult:
    return RUNNERS[design.kind](design)


def write_results(result: SimResult, out_prefix: Union[str, Path]) -> Tuple[Path, Path]:
    """
    Per-cell CSV plus a JSON run manifest.

    Returns:
        (csv path, manifest path)
    """
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_prefix.with_name(out_prefix.name + ".cells.csv")
    manifest_path = out_prefix.with_name(out_prefix.name + ".manifest.json")
    frame = pd.DataFrame(result.cells)
    frame.insert(0, "design", result.design.kind.value)
    frame.to_csv(csv_path, index=False, float_format="%.10g")
    manifest = {
        "design": result.design.model_dump(mode="json"),
        "design_hash": result.design.design_hash(),
        "seed": result.design.seed,
        "version": result.version,
        "n_cells": len(result.cells),
        "n_failures": len(result.failures),
        "failures": [f.model_dump(mode="json") for f in result.failures],
    }
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Wrote {len(result.cells)} cell rows to {csv_path}")
    return csv_path, manifest_path
