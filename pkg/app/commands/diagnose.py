"""
diagnose subcommand - disagreement histograms and the aligned-vs-conflicting
loss check for a biased model and a freshly initialized one.
"""

import logging
from pathlib import Path
from typing import Optional

from app.config import ExperimentConfig
from app.services import seeding
from app.services.checkpoint import load_checkpoint
from app.services.dpr_engine import train_biased
from app.services.experiment import build_datasets, concat_frames
from app.services.group_eval import check_assumption1, disagreement_histogram
from app.services.nn_core import init_model
from app.services.reporting import (
    ASSUMPTION_COLUMNS,
    ASSUMPTION_FILE,
    HISTOGRAM_COLUMNS,
    HISTOGRAM_FILE,
    assumption_row,
    histogram_rows,
    write_csv,
    write_records,
)

logger = logging.getLogger(__name__)


def cmd_diagnose(config: ExperimentConfig, checkpoint: Optional[str] = None) -> tuple[Path, Path]:
    """
    Diagnostics on the training data of every (rho, seed) cell.

    The biased model comes from the checkpoint when one is given and is
    trained with the config's schedule otherwise. The random model shares its
    architecture.
    """
    loaded = load_checkpoint(checkpoint) if checkpoint else None
    assumption_records = []
    histogram_frames = []

    for rho in config.data.rho:
        schedule = config.schedule_for(rho)
        for seed in config.run.seeds:
            train, val, _ = build_datasets(config.data, rho, seed)
            biased = loaded if loaded is not None else train_biased(train, schedule, seed, val if len(val) else None)[0]
            random_model = init_model(biased.layer_sizes, seeding.derive_seed(seed, seeding.STREAM_BIASED_INIT, 1))

            for name, model in (("biased", biased), ("random", random_model)):
                histogram = disagreement_histogram(model, train, schedule.tau)
                result = check_assumption1(model, train)
                assumption_records.append(assumption_row(name, result, histogram, rho, seed))
                histogram_frames.append(histogram_rows(name, histogram, rho, seed))
                logger.info(
                    "rho=%g seed=%d %s model: status=%s gap=%s mean disagreement %.4f / %.4f",
                    rho, seed, name, result.status, result.gap,
                    histogram.aligned_mean, histogram.conflicting_mean,
                )

    out_dir = config.output_dir() / config.run_id() / "diagnose"
    return (
        write_csv(concat_frames(histogram_frames), out_dir / HISTOGRAM_FILE, HISTOGRAM_COLUMNS),
        write_records(assumption_records, out_dir / ASSUMPTION_FILE, ASSUMPTION_COLUMNS),
    )
