"""Command-line driver: `python -m cavlab <stage> [options]`."""
import argparse
import json
import logging
import sys

from cavlab import config as settings
from cavlab.errors import CavLabError, ConfigError
from cavlab.pipeline import Pipeline, apply_overrides, load_config, stored_config
from cavlab.schemas import ExperimentConfig

logger = logging.getLogger("cavlab")

STAGES = ("gen", "train", "capture", "cav", "tcav", "consistency", "entangle", "spatial", "report", "verify-theory")


def _csv(value: str) -> list[str]:
    items = [v.strip() for v in value.split(",") if v.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cavlab", description="Concept activation vector laboratory.")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="STAGE")
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", help="experiment config (JSON); defaults to the config stored by gen")
        p.add_argument("--out", default=None, help="artifact directory (default: $CAVLAB_OUT)")
        p.add_argument("--seed", type=int, default=None, help="seed for dataset, training and probes")
        p.add_argument("--layers", type=_csv, default=None, help="comma-separated layer ids, e.g. layers.2,layers.3")
        p.add_argument("--concepts", type=_csv, default=None, help="comma-separated concept names")
        p.add_argument("--classes", type=_csv, default=None, help="comma-separated class names")
        p.add_argument("--gamma", type=float, default=None, help="perturbation scale for consistency")
        p.add_argument("--r", type=int, default=None, help="number of random sets per concept")
        p.add_argument("--p-threshold", type=float, default=None, help="significance threshold")
        p.add_argument("--threads", type=int, default=None, help="worker threads (capped by $CAVLAB_THREADS)")
        if stage == "gen":
            p.add_argument("--png", type=int, default=0, help="also write the first N training images as PNG")
        if stage == "tcav":
            p.add_argument("--significant-only", action="store_true",
                           help="consistency scores over significant layers only")
    return parser


def resolve_config(args: argparse.Namespace, out: str) -> ExperimentConfig:
    if args.config:
        config = load_config(args.config)
    elif args.stage in ("gen", "verify-theory"):
        config = ExperimentConfig()
    else:
        config = stored_config(out)
    return apply_overrides(
        config,
        seed=args.seed,
        layers=args.layers,
        concepts=args.concepts,
        classes=args.classes,
        gamma=args.gamma,
        r=args.r,
        p_threshold=args.p_threshold,
    )


def run_stage(pipeline: Pipeline, args: argparse.Namespace) -> str:
    if args.stage == "gen":
        return pipeline.gen(png=args.png)
    if args.stage == "tcav":
        return pipeline.tcav(significant_only=args.significant_only)
    if args.stage == "verify-theory":
        return pipeline.verify_theory()
    return getattr(pipeline, args.stage)()


def _fail(error: BaseException, exit_code: int) -> int:
    print(json.dumps({"error": str(error), "type": type(error).__name__, "exit_code": exit_code}), file=sys.stderr)
    return exit_code


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed usage; unknown stages and bad flags are config errors
        return 0 if e.code == 0 else 2

    try:
        settings.validate_config()
    except ConfigError as e:
        return _fail(e, e.exit_code)
    logging.basicConfig(level=settings.CAVLAB_LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    out = args.out or settings.CAVLAB_OUT
    print(f"\n============ Step: {args.stage} ==============\n")
    try:
        config = resolve_config(args, out)
        pipeline = Pipeline(config, out, args.threads)
        summary = run_stage(pipeline, args)
    except CavLabError as e:
        logger.debug("stage %s failed", args.stage, exc_info=True)
        return _fail(e, e.exit_code)
    except Exception as e:
        logger.exception("unexpected failure in %s", args.stage)
        return _fail(e, 1)
    print(summary)
    return 0


def main() -> None:
    sys.exit(run_command())
