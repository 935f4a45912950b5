"""
verify-bounds subcommand - empirical checks of both group-loss bounds for a checkpoint.
"""

import logging
from pathlib import Path

import numpy as np

from app.config import ExperimentConfig
from app.models.network import ClassifierModel
from app.services import seeding
from app.services.biased_data import build_population
from app.services.bounds import hoeffding_violation_rate, theorem1_report, theorem2_report
from app.services.checkpoint import load_checkpoint
from app.services.errors import ShapeError
from app.services.experiment import build_datasets, source_pools
from app.services.group_eval import per_example_losses
from app.services.reporting import (
    BOUND_COLUMNS,
    BOUNDS_FILE,
    HOEFFDING_COLUMNS,
    HOEFFDING_FILE,
    bound_row,
    hoeffding_row,
    write_records,
)

logger = logging.getLogger(__name__)

BERNOULLI_P = 0.5
BERNOULLI_SIZE = 10_000


def _check_architecture(model: ClassifierModel, feature_dim: int, num_classes: int) -> None:
    if model.input_dim != feature_dim or model.num_classes != num_classes:
        raise ShapeError(
            f"Checkpoint expects {model.input_dim} features / {model.num_classes} classes, "
            f"data has {feature_dim} / {num_classes}"
        )


def hoeffding_populations(model: ClassifierModel, population, loss_cap: float, seed: int) -> dict[str, np.ndarray]:
    """Capped per-example group losses of the model, plus a C-scaled Bernoulli population."""
    losses, _ = per_example_losses(model, population, "ce", loss_cap=loss_cap)
    conflicting = population.conflicting
    rng = seeding.rng_for(seed, seeding.STREAM_MONTE_CARLO)
    return {
        "aligned_loss": losses[~conflicting],
        "conflicting_loss": losses[conflicting],
        "bernoulli": loss_cap * (rng.random(BERNOULLI_SIZE) < BERNOULLI_P).astype(np.float64),
    }


def cmd_verify_bounds(config: ExperimentConfig, checkpoint: str) -> tuple[Path, Path]:
    """
    Bound reports for every seed x C x delta x theorem, then Hoeffding
    Monte-Carlo runs for every population x n_b x C x delta.

    The train sample is redrawn per seed (first rho of the config); the
    population is drawn once.
    """
    model = load_checkpoint(checkpoint)
    rho = config.data.rho[0]
    gen = config.data.gen_config(rho)
    caps = config.bounds.caps_for(config.data.num_classes)
    _, test_pool = source_pools(config.data)

    population = build_population(
        gen,
        config.bounds.population_per_group,
        seeding.derive_seed(0, seeding.STREAM_POPULATION),
        test_pool,
    )
    _check_architecture(model, population.feature_dim, population.num_classes)

    bound_records = []
    for seed in config.run.seeds:
        train, _, _ = build_datasets(config.data, rho, seed)
        for loss_cap in caps:
            for delta in config.bounds.deltas:
                for report in (
                    theorem1_report(model, train, population, loss_cap, delta),
                    theorem2_report(model, train, population, loss_cap, delta),
                ):
                    bound_records.append(bound_row(report, seed))

    held = sum(r["holds"] for r in bound_records)
    logger.info("Bounds held in %d of %d reports", held, len(bound_records))

    hoeffding_records = []
    for loss_cap in caps:
        populations = hoeffding_populations(model, population, loss_cap, config.run.seeds[0])
        for name, values in populations.items():
            for n_b in config.bounds.hoeffding_sizes:
                for delta in config.bounds.deltas:
                    stats = hoeffding_violation_rate(
                        values, n_b, loss_cap, delta,
                        trials=config.bounds.hoeffding_trials,
                        seed=seeding.derive_seed(config.run.seeds[0], seeding.STREAM_MONTE_CARLO, n_b),
                    )
                    hoeffding_records.append(hoeffding_row(name, n_b, loss_cap, stats))

    out_dir = config.output_dir() / config.run_id() / "bounds"
    return (
        write_records(bound_records, out_dir / BOUNDS_FILE, BOUND_COLUMNS),
        write_records(hoeffding_records, out_dir / HOEFFDING_FILE, HOEFFDING_COLUMNS),
    )
