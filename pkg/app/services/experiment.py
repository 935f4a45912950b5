"""
Experiment cells.
One cell = one (config variant, rho, seed): build data, train in the selected
mode, evaluate on the unbiased test set and return flat metric rows.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from app.config import DataSection, ExperimentConfig
from app.models.dataset import BiasedDataset, DatasetKind
from app.models.training import TrainingLog, TrainSchedule
from app.services import seeding
from app.services.biased_data import generate, make_unbiased_test, split
from app.services.checkpoint import save_checkpoint
from app.services.dpr_engine import run_dpr, train_erm
from app.services.errors import ConfigError
from app.services.group_eval import group_losses
from app.services.reporting import MetricsRow, failed_row, gap_log_frame, rows_from_metrics, training_log_frame

logger = logging.getLogger(__name__)

Source = Optional[tuple[np.ndarray, np.ndarray]]


@dataclass
class CellSpec:
    axis: str
    variant: str
    mode: str
    rho: float
    seed: int
    schedule: TrainSchedule

    @property
    def label(self) -> str:
        variant = self.variant.replace("=", "").replace(",", "_").replace(" ", "")
        return f"{self.axis}_{variant}_{self.mode}_rho{self.rho:g}_seed{self.seed}"


@dataclass
class CellResult:
    spec: CellSpec
    rows: list[MetricsRow]
    seconds: float
    training_log: pd.DataFrame = field(default_factory=pd.DataFrame)
    gap_log: pd.DataFrame = field(default_factory=pd.DataFrame)

    @property
    def failed(self) -> bool:
        return any(row.status == "failed" for row in self.rows)


# ============================================================
# Data
# ============================================================


@lru_cache(maxsize=4)
def _idx_pools(image_file: str, label_file: str, n_test: int) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    from app.services.idx_reader import read_idx_pair

    gray, labels = read_idx_pair(image_file, label_file)
    if n_test >= gray.shape[0]:
        raise ConfigError(f"n_test={n_test} leaves no training images out of {gray.shape[0]}")
    cut = gray.shape[0] - n_test
    return (gray[:cut], labels[:cut]), (gray[cut:], labels[cut:])


def source_pools(data: DataSection) -> tuple[Source, Source]:
    """(train pool, test pool) of grayscale images; (None, None) for synthetic kinds."""
    if data.kind != DatasetKind.COLORIZED_IDX:
        return None, None
    return _idx_pools(str(data.idx_images), str(data.idx_labels), data.n_test)


def build_datasets(data: DataSection, rho: float, seed: int) -> tuple[BiasedDataset, BiasedDataset, BiasedDataset]:
    """
    Train, validation and unbiased test sets for one (rho, seed).

    The test set depends only on the seed, so every rho shares it.
    """
    train_pool, test_pool = source_pools(data)
    gen = data.gen_config(rho)
    full = generate(gen, data.n_train, seeding.derive_seed(seed, seeding.STREAM_TRAIN_DATA), train_pool)
    train, val = split(full, data.val_fraction, seeding.derive_seed(seed, seeding.STREAM_SPLIT))
    test = make_unbiased_test(gen, data.n_test, seeding.derive_seed(seed, seeding.STREAM_TEST_DATA), test_pool)
    return train, val, test


# ============================================================
# Cells
# ============================================================


def _phase_name(mode: str) -> str:
    return {"dpr": "debiased", "reweighted": "reweighted", "erm": "erm"}[mode]


def run_cell(config: ExperimentConfig, spec: CellSpec, run_id: str, checkpoint_dir: Optional[Path] = None) -> CellResult:
    """
    Run one cell end to end.

    Raises whatever the data, training or evaluation phase raises;
    run_cell_safe turns that into a failed row.
    """
    started = time.perf_counter()
    train, val, test = build_datasets(config.data, spec.rho, spec.seed)
    val = val if len(val) else None
    identity = dict(run_id=run_id, axis=spec.axis, variant=spec.variant, mode=spec.mode, rho=spec.rho, seed=spec.seed)

    models = {}
    if spec.mode == "erm":
        models["erm"], log = train_erm(train, spec.schedule, spec.seed, val)
    else:
        result = run_dpr(train, spec.schedule, spec.seed, val, reweight=spec.mode == "reweighted")
        models["biased"] = result.biased
        models[_phase_name(spec.mode)] = result.debiased
        log = result.log

    rows = []
    for phase, model in models.items():
        metrics = group_losses(model, test, loss_kind="ce")
        rows.extend(rows_from_metrics(metrics, phase=phase, **identity))
        logger.info(
            "[%s] %s: unbiased acc %.4f, worst-group acc %.4f",
            spec.label, phase, metrics.unbiased_accuracy, metrics.worst_group_accuracy,
        )
        if checkpoint_dir is not None:
            save_checkpoint(model, str(Path(checkpoint_dir) / f"{spec.label}_{phase}.dprm"))

    return CellResult(
        spec=spec,
        rows=rows,
        seconds=time.perf_counter() - started,
        training_log=training_log_frame(log, **identity),
        gap_log=gap_log_frame(log, **identity),
    )


def run_cell_safe(config: ExperimentConfig, spec: CellSpec, run_id: str, checkpoint_dir: Optional[Path] = None) -> CellResult:
    """run_cell, with any failure recorded as a failed row."""
    started = time.perf_counter()
    try:
        return run_cell(config, spec, run_id, checkpoint_dir)
    except Exception as e:
        logger.error("[%s] cell failed: %s", spec.label, e)
        row = failed_row(run_id, spec.axis, spec.variant, spec.mode, spec.rho, spec.seed, e)
        return CellResult(spec=spec, rows=[row], seconds=time.perf_counter() - started)


def _run_star(args: tuple) -> CellResult:
    return run_cell_safe(*args)


def run_cells(
    config: ExperimentConfig,
    specs: list[CellSpec],
    run_id: str,
    checkpoint_dir: Optional[Path] = None,
    workers: int = 1,
) -> list[CellResult]:
    """
    Run cells serially or across a process pool.

    Results come back in input order either way.
    """
    jobs = [(config, spec, run_id, checkpoint_dir) for spec in specs]
    logger.info("Running %d cells with %d worker(s)", len(jobs), workers)
    if workers <= 1 or len(jobs) <= 1:
        return [_run_star(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_star, jobs))


def timings_frame(results: list[CellResult]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            (r.spec.axis, r.spec.variant, r.spec.mode, r.spec.rho, r.spec.seed, r.seconds, "failed" if r.failed else "ok")
            for r in results
        ],
        columns=["axis", "variant", "mode", "rho", "seed", "seconds", "status"],
    )


def concat_frames(frames: list[pd.DataFrame]) -> pd.DataFrame:
    frames = [f for f in frames if not f.empty]
    if not frames:
        return pd.DataFrame()
    return pd.concat(frames, ignore_index=True)
