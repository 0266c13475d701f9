"""
Command-line entry point: fit, simulate, generate, validate
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml
from pydantic import ValidationError

from latentee import __version__
from latentee.config import settings
from latentee.engines.fit import METHODS, fit_model
from latentee.engines.io.config import OUTCOME_STRUCTURES, ModelConfigLoader
from latentee.engines.io.loader import load_data, write_dataset
from latentee.engines.io.report import build_fit_result, render_table, write_report
from latentee.engines.simulation.generator import design_cells, design_config, gen_dataset, true_params
from latentee.engines.simulation.runner import run_experiment, write_results
from latentee.engines.simulation.schemas import DesignKind, SimDesign
from latentee.errors import BadDesign, InternalError, LatentEEError, ParseError, UsageError

logger = logging.getLogger(__name__)


def _beta_star(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--beta-star expects comma-separated numbers, got '{text}'")


def load_design(kind: Optional[str], params_path: Optional[str]) -> SimDesign:
    """
    Design from a YAML file, the shipped design of that kind, or defaults.

    Raises:
        ParseError: unreadable or malformed design file
        BadDesign: design kind disagrees with --design
    """
    path = Path(params_path) if params_path else None
    if path is None and kind is not None:
        shipped = Path(settings.configs_dir) / "designs" / f"{kind}.yaml"
        path = shipped if shipped.exists() else None
    if path is None:
        return SimDesign(kind=DesignKind(kind or "bias"))
    if not path.exists():
        raise ParseError("design file not found", path=str(path))
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
        design = SimDesign(**data)
    except yaml.YAMLError as e:
        raise ParseError(f"malformed design file: {e}", path=str(path))
    except (TypeError, ValidationError) as e:
        raise BadDesign(f"invalid design in {path}: {e}")
    if kind is not None and design.kind.value != kind:
        raise BadDesign(f"design file is for '{design.kind.value}', --design asks for '{kind}'")
    return design


def _override(design: SimDesign, args) -> SimDesign:
    updates = {k: getattr(args, k) for k in ("reps", "n", "seed") if getattr(args, k, None) is not None}
    if not updates:
        return design
    try:
        return SimDesign(**{**design.model_dump(), **updates})
    except ValidationError as e:
        raise BadDesign(str(e))


def cmd_fit(args) -> int:
    loader = ModelConfigLoader()
    config = loader.load(args.model)
    method = args.method or config.outcome.method
    beta_star = _beta_star(args.beta_star)
    if beta_star is None and args.method is None:
        beta_star = config.outcome.beta_star
    if method == "ee2" and not beta_star:
        raise UsageError("--method ee2 requires --beta-star")
    if method != "ee2" and args.beta_star is not None:
        raise UsageError("--beta-star only applies to --method ee2")
    if args.deterministic:
        settings.workers = 1

    spec = config.to_spec(args.outcome_cov)
    dataset = load_data(args.data_x, args.data_y, config, spec)
    fit = fit_model(spec, dataset, method, beta_star)
    result = build_fit_result(
        fit, config=config.model_dump(mode="json"), config_hash=config.config_hash(),
        seed=args.seed, deterministic=args.deterministic,
    )
    paths = write_report(result, args.out, fit)
    print(render_table(result), end="")
    logger.info(f"Report written to {paths['json']}")
    return 0


def cmd_simulate(args) -> int:
    if args.deterministic:
        settings.workers = 1
    elif args.workers is not None:
        settings.workers = args.workers
    design = _override(load_design(args.design, args.params), args)
    result = run_experiment(design)
    csv_path, manifest_path = write_results(result, args.out)
    print(f"{len(result.cells)} cell rows -> {csv_path}")
    print(f"manifest -> {manifest_path}")
    if result.failures:
        print(f"{len(result.failures)} replicate fit(s) failed; see manifest", file=sys.stderr)
    return 0


def cmd_generate(args) -> int:
    design = _override(load_design(args.design, args.params), args)
    cells = design_cells(design)
    if not 0 <= args.cell < len(cells):
        raise UsageError(f"--cell must be in 0..{len(cells) - 1}")
    cell = cells[args.cell]
    dataset = gen_dataset(design, args.replicate, cell)
    truth = true_params(design, cell)

    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    subjects = prefix.with_name(prefix.name + ".subjects.csv")
    outcomes = prefix.with_name(prefix.name + ".outcomes.csv")
    model = prefix.with_name(prefix.name + ".model.yaml")
    truth_path = prefix.with_name(prefix.name + ".truth.json")
    write_dataset(dataset, subjects, outcomes)
    ModelConfigLoader().dump(design_config(design, design.true_cov, cell.me_fraction), model)
    with open(truth_path, "w", encoding="utf-8") as f:
        json.dump({
            "cell": cell.as_dict(),
            "replicate": args.replicate,
            "seed": design.seed,
            "design_hash": design.design_hash(),
            "version": __version__,
            "parameters": truth.as_dict(),
            "u_true": np.asarray(dataset.u_true).tolist(),
        }, f, indent=2)
    for path in (subjects, outcomes, model, truth_path):
        print(path)
    return 0


def cmd_validate(args) -> int:
    config = ModelConfigLoader().load(args.model)
    spec = config.to_spec(args.outcome_cov)
    layout = spec.layout
    print(json.dumps({
        "valid": True,
        "name": spec.name,
        "config_hash": config.config_hash(),
        "counts": {"theta1": layout.k1, "theta2": layout.k2, "theta3": layout.k3},
        "parameters": layout.names,
    }, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentee",
        description="Latent exposure models with longitudinal outcomes",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="Fit a model to a data bundle")
    fit.add_argument("--data-x", required=True, help="Subjects file (wide)")
    fit.add_argument("--data-y", required=True, help="Outcomes file (long)")
    fit.add_argument("--model", required=True, help="Model configuration (YAML)")
    fit.add_argument("--method", choices=METHODS, help="Estimator (default: from the configuration)")
    fit.add_argument("--beta-star", metavar="V1,V2,...", help="Fixed weight beta for ee2")
    fit.add_argument("--outcome-cov", choices=OUTCOME_STRUCTURES, help="Override the outcome covariance")
    fit.add_argument("--deterministic", action="store_true", help="Single worker, reproducible output")
    fit.add_argument("--seed", type=int, help="Seed recorded in the report for provenance")
    fit.add_argument("--out", required=True, metavar="PREFIX", help="Output prefix")
    fit.set_defaults(handler=cmd_fit)

    sim = sub.add_parser("simulate", help="Run a simulation experiment")
    sim.add_argument("--design", choices=[k.value for k in DesignKind], help="Experiment kind")
    sim.add_argument("--params", metavar="DESIGN_FILE", help="Design file (YAML)")
    sim.add_argument("--reps", type=int, help="Replicates per cell")
    sim.add_argument("--n", type=int, help="Subjects per dataset")
    sim.add_argument("--seed", type=int, help="Master seed")
    sim.add_argument("--workers", type=int, help="Worker processes")
    sim.add_argument("--deterministic", action="store_true", help="Single worker")
    sim.add_argument("--out", required=True, metavar="PREFIX", help="Output prefix")
    sim.set_defaults(handler=cmd_simulate)

    gen = sub.add_parser("generate", help="Write one simulated data bundle with its model and truth")
    gen.add_argument("--design", choices=[k.value for k in DesignKind], help="Experiment kind")
    gen.add_argument("--params", metavar="DESIGN_FILE", help="Design file (YAML)")
    gen.add_argument("--n", type=int, help="Subjects")
    gen.add_argument("--seed", type=int, help="Master seed")
    gen.add_argument("--cell", type=int, default=0, help="Design cell index (default: 0)")
    gen.add_argument("--replicate", type=int, default=0, help="Replicate index (default: 0)")
    gen.add_argument("--out", required=True, metavar="PREFIX", help="Output prefix")
    gen.set_defaults(handler=cmd_generate, reps=None)

    val = sub.add_parser("validate", help="Validate a model configuration")
    val.add_argument("--model", required=True, help="Model configuration (YAML)")
    val.add_argument("--outcome-cov", choices=OUTCOME_STRUCTURES, help="Override the outcome covariance")
    val.set_defaults(handler=cmd_validate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        return args.handler(args)
    except LatentEEError as e:
        logger.error(e.message)
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        return 130
    except Exception as e:
        err = InternalError.wrap(e)
        logger.exception(f"Unexpected failure: {err.message}")
        print(json.dumps(err.to_dict()), file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
