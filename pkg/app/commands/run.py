"""
run subcommand - the selected training mode over every (rho, seed) cell.
"""

import logging
from pathlib import Path

from app.config import ExperimentConfig
from app.services.experiment import CellResult, CellSpec, concat_frames, run_cells, timings_frame
from app.services.reporting import GAP_LOG_FILE, TIMINGS_FILE, TRAINING_LOG_FILE, write_csv, write_metrics

logger = logging.getLogger(__name__)


def run_specs(config: ExperimentConfig) -> list[CellSpec]:
    return [
        CellSpec(
            axis="run",
            variant="default",
            mode=config.run.mode,
            rho=rho,
            seed=seed,
            schedule=config.schedule_for(rho),
        )
        for rho in config.data.rho
        for seed in config.run.seeds
    ]


def write_results(results: list[CellResult], out_dir: Path, prefix: str = "") -> None:
    """Metrics, summary, training-log, gap-log and timing CSVs for a batch of cells."""
    write_metrics([row for r in results for row in r.rows], out_dir, prefix)
    write_csv(concat_frames([r.training_log for r in results]), out_dir / f"{prefix}{TRAINING_LOG_FILE}")
    write_csv(concat_frames([r.gap_log for r in results]), out_dir / f"{prefix}{GAP_LOG_FILE}")
    write_csv(timings_frame(results), out_dir / f"{prefix}{TIMINGS_FILE}")


def cmd_run(config: ExperimentConfig) -> list[CellResult]:
    """
    Train and evaluate every (rho, seed) cell; failed cells become failed rows.

    Output goes to <out_dir>/<run_id>/.
    """
    run_id = config.run_id()
    out_dir = config.output_dir() / run_id
    checkpoint_dir = out_dir / "checkpoints" if config.run.save_checkpoints else None

    results = run_cells(config, run_specs(config), run_id, checkpoint_dir, config.worker_count())
    write_results(results, out_dir)

    failed = sum(r.failed for r in results)
    logger.info("Run %s finished: %d cells, %d failed", run_id, len(results), failed)
    return results
