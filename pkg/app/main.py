"""
Command-line entry point.

    python -m app.main run --config configs/desk.ini --seeds 0,1,2
    python -m app.main ablate --config configs/desk.ini --components --sampling
"""

import argparse
import logging
import sys
from typing import Any, Optional

from app.config import ExperimentConfig, get_settings, load_experiment_config
from app.services.errors import ConfigError

logger = logging.getLogger("app")

EXIT_OK = 0
EXIT_FAILED_CELL = 1
EXIT_CONFIG_ERROR = 2


def setup_logging(level: Optional[str] = None) -> None:
    settings = get_settings()
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


# ============================================================
# Argument parsing
# ============================================================


def _csv_list(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config (defaults apply when omitted)")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--seeds", type=_csv_list, help="Comma-separated seeds")
    common.add_argument("--rho", type=_csv_list, help="Comma-separated bias-conflicting ratios")
    common.add_argument("--mode", choices=["dpr", "erm", "reweighted"])
    common.add_argument("--q", type=_csv_list, help="GCE q (a grid for ablate)")
    common.add_argument("--tau", type=_csv_list, help="Softmax temperature (a grid for ablate)")
    common.add_argument("--no-init", action="store_true", help="Debiased model starts from a fresh init")
    common.add_argument("--no-gce", action="store_true", help="Train the biased model with CE")
    common.add_argument("--no-augment", action="store_true", help="Disable augmentation")
    common.add_argument("--idx-images", help="IDX image file to colorize")
    common.add_argument("--idx-labels", help="IDX label file to colorize")
    common.add_argument("--workers", type=int, help="Parallel cells")
    common.add_argument("--log-level", help="Logging level (default from DPR_LOG_LEVEL)")

    parser = argparse.ArgumentParser(prog="dpr", description=get_settings().app_name)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="Write biased train/test sets as DPRD files")
    sub.add_parser("run", parents=[common], help="Train and evaluate every (rho, seed) cell")

    ablate = sub.add_parser("ablate", parents=[common], help="Ablation sweeps")
    ablate.add_argument("--components", action="store_true", help="Initialization/GCE/augmentation toggles")
    ablate.add_argument("--sampling", action="store_true", help="Resampling vs reweighting")

    verify = sub.add_parser("verify-bounds", parents=[common], help="Check both bounds for a checkpoint")
    verify.add_argument("--checkpoint", required=True, help="DPRM checkpoint to verify")

    diagnose = sub.add_parser("diagnose", parents=[common], help="Disagreement histograms and group-loss check")
    diagnose.add_argument("--checkpoint", help="Biased-model checkpoint (trained on the fly when omitted)")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    """
    Map CLI flags onto config sections.

    --q and --tau are sweep grids for ablate and single schedule values elsewhere.
    """
    overrides: dict[str, dict[str, Any]] = {"data": {}, "train": {}, "sweep": {}, "run": {}}

    if args.rho:
        overrides["data"]["rho"] = args.rho
    if args.idx_images or args.idx_labels:
        overrides["data"].update(kind="colorized-idx", idx_images=args.idx_images, idx_labels=args.idx_labels)

    if args.seeds:
        overrides["run"]["seeds"] = args.seeds
    if args.mode:
        overrides["run"]["mode"] = args.mode
    if args.out:
        overrides["run"]["out_dir"] = args.out
    if args.workers:
        overrides["run"]["workers"] = args.workers

    if args.no_init:
        overrides["train"]["init_from_biased"] = False
    if args.no_gce:
        overrides["train"]["use_gce"] = False
    if args.no_augment:
        overrides["train"]["augment"] = False

    for name in ("q", "tau"):
        values = getattr(args, name)
        if not values:
            continue
        if args.command == "ablate":
            overrides["sweep"][name] = values
        elif len(values) == 1:
            overrides["train"][name] = values[0]
        else:
            raise ConfigError(f"--{name} takes a single value outside ablate")

    if args.command == "ablate":
        if args.components:
            overrides["sweep"]["components"] = True
        if args.sampling:
            overrides["sweep"]["sampling"] = True

    return {section: values for section, values in overrides.items() if values}


# ============================================================
# Dispatch
# ============================================================


def dispatch(command: str, config: ExperimentConfig, args: argparse.Namespace) -> int:
    if command == "generate":
        from app.commands.generate import cmd_generate

        cmd_generate(config, config.output_dir() / config.run_id() / "data")
        return EXIT_OK

    if command == "run":
        from app.commands.run import cmd_run

        results = cmd_run(config)
        return EXIT_FAILED_CELL if any(r.failed for r in results) else EXIT_OK

    if command == "ablate":
        from app.commands.ablate import cmd_ablate

        results = cmd_ablate(config)
        failed = any(r.failed for axis in results.values() for r in axis)
        return EXIT_FAILED_CELL if failed else EXIT_OK

    if command == "verify-bounds":
        from app.commands.verify_bounds import cmd_verify_bounds

        cmd_verify_bounds(config, args.checkpoint)
        return EXIT_OK

    from app.commands.diagnose import cmd_diagnose

    cmd_diagnose(config, args.checkpoint)
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    """Parse arguments, load the config and run one subcommand; returns the exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    settings = get_settings()

    try:
        config = load_experiment_config(args.config, overrides_from_args(args))
        logger.info("Starting %s %s (run %s)", settings.app_name, args.command, config.run_id())
        code = dispatch(args.command, config, args)
    except ConfigError as e:
        logger.error("Config error: %s", e)
        return EXIT_CONFIG_ERROR
    except (OSError, ValueError, IndexError, RuntimeError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_FAILED_CELL

    logger.info("Finished %s with exit code %d", args.command, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
