"""
CSV emission and multi-seed aggregation.
Every writer uses a fixed column order and locale-independent number formatting.
"""

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import pandas as pd

from app.models.metrics import (
    ALIGNED,
    CONFLICTING,
    Assumption1Result,
    BoundReport,
    DisagreementHistogram,
    GroupMetrics,
    MonteCarloBoundStats,
)
from app.models.training import TrainingLog

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"
ALL_GROUPS = "all"

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.csv"
TIMINGS_FILE = "timings.csv"
TRAINING_LOG_FILE = "training_log.csv"
GAP_LOG_FILE = "group_gap.csv"
BOUNDS_FILE = "bounds.csv"
HOEFFDING_FILE = "hoeffding.csv"
HISTOGRAM_FILE = "disagreement_histogram.csv"
ASSUMPTION_FILE = "assumption.csv"

BOUND_COLUMNS = [
    "theorem", "seed", "C", "delta", "lhs", "rhs", "holds",
    "max_group_loss", "conc_term", "intermediate_rhs", "n", "n_aligned", "n_conflicting",
]
HOEFFDING_COLUMNS = ["population", "n_b", "C", "delta", "trials", "violations", "violation_rate", "threshold"]
ASSUMPTION_COLUMNS = [
    "rho", "seed", "model", "status", "loss_aligned", "loss_conflicting", "gap",
    "disagreement_aligned", "disagreement_conflicting",
]
HISTOGRAM_COLUMNS = ["rho", "seed", "model", "bin_lo", "bin_hi", "aligned_count", "conflicting_count"]
SUMMARY_KEYS = ["run_id", "axis", "variant", "mode", "rho", "phase", "group"]
SUMMARY_VALUES = ["accuracy", "unbiased_acc", "worst_group_acc", "avg_loss", "loss_gap"]


@dataclass
class MetricsRow:
    """One (config, seed, phase, group) record of the metrics CSV."""

    run_id: str
    axis: str
    variant: str
    mode: str
    rho: float
    seed: int
    phase: str
    group: str
    n: int = 0
    avg_loss: float = math.nan
    accuracy: float = math.nan
    unbiased_acc: float = math.nan
    worst_group_acc: float = math.nan
    loss_gap: float = math.nan
    status: str = "ok"
    error: str = ""


# Core columns first, then the sweep identity and status columns
METRICS_COLUMNS = [
    "run_id", "phase", "rho", "seed", "group", "n", "avg_loss", "accuracy",
    "unbiased_acc", "worst_group_acc", "loss_gap", "axis", "variant", "mode", "status", "error",
]


def rows_from_metrics(
    metrics: GroupMetrics,
    run_id: str,
    axis: str,
    variant: str,
    mode: str,
    rho: float,
    seed: int,
    phase: str,
) -> list[MetricsRow]:
    """
    Flatten GroupMetrics into one 'all' row plus one row per nonempty group.

    Accuracy columns that describe the whole test set repeat on every row.
    """
    base = dict(run_id=run_id, axis=axis, variant=variant, mode=mode, rho=rho, seed=seed, phase=phase)
    shared = dict(
        unbiased_acc=metrics.unbiased_accuracy,
        worst_group_acc=metrics.worst_group_accuracy,
        loss_gap=metrics.loss_gap,
    )
    rows = [
        MetricsRow(
            **base, group=ALL_GROUPS, n=metrics.n,
            avg_loss=metrics.avg_loss, accuracy=metrics.unbiased_accuracy, **shared,
        )
    ]
    for name in (ALIGNED, CONFLICTING):
        stats = metrics.groups.get(name)
        if stats is None:
            continue
        rows.append(MetricsRow(**base, group=name, n=stats.n, avg_loss=stats.avg_loss, accuracy=stats.accuracy, **shared))
    return rows


def failed_row(run_id: str, axis: str, variant: str, mode: str, rho: float, seed: int, error: BaseException) -> MetricsRow:
    message = f"{type(error).__name__}: {error}".replace("\n", " ")
    return MetricsRow(
        run_id=run_id, axis=axis, variant=variant, mode=mode, rho=rho, seed=seed,
        phase="failed", group=ALL_GROUPS, status="failed", error=message,
    )


# ============================================================
# Frames
# ============================================================


def metrics_frame(rows: Iterable[MetricsRow]) -> pd.DataFrame:
    """Rows as a DataFrame, merged in (axis, variant, mode, rho, seed) order."""
    frame = pd.DataFrame([asdict(r) for r in rows], columns=METRICS_COLUMNS)
    if frame.empty:
        return frame
    return frame.sort_values(
        ["axis", "variant", "mode", "rho", "seed"], kind="mergesort"
    ).reset_index(drop=True)


def summarize(metrics: pd.DataFrame) -> pd.DataFrame:
    """
    Mean and standard deviation across seeds for every (config, phase, group).

    Failed rows are excluded; 'seeds' counts the runs that went into each mean.
    """
    ok = metrics[metrics["status"] == "ok"]
    columns = SUMMARY_KEYS + ["seeds"] + [f"{c}_{s}" for c in SUMMARY_VALUES for s in ("mean", "std")]
    if ok.empty:
        return pd.DataFrame(columns=columns)

    grouped = ok.groupby(SUMMARY_KEYS, sort=True, dropna=False)
    summary = grouped[SUMMARY_VALUES].agg(["mean", "std"])
    summary.columns = [f"{c}_{s}" for c, s in summary.columns]
    summary["seeds"] = grouped["seed"].nunique()
    return summary.reset_index()[columns]


def bound_row(report: BoundReport, seed: int) -> dict:
    c = report.components
    return {
        "theorem": report.theorem,
        "seed": seed,
        "C": c["C"],
        "delta": c["delta"],
        "lhs": report.lhs,
        "rhs": report.rhs,
        "holds": bool(report.holds),
        "max_group_loss": c["max_group_train_loss"],
        "conc_term": c["concentration_term"],
        "intermediate_rhs": c.get("intermediate_rhs", math.nan),
        "n": int(c["n"]),
        "n_aligned": int(c["n_aligned"]),
        "n_conflicting": int(c["n_conflicting"]),
    }


def hoeffding_row(population: str, n_b: int, loss_cap: float, stats: MonteCarloBoundStats) -> dict:
    return {
        "population": population,
        "n_b": n_b,
        "C": loss_cap,
        "delta": stats.delta,
        "trials": stats.trials,
        "violations": stats.violations,
        "violation_rate": stats.violation_rate,
        "threshold": stats.threshold,
    }


def assumption_row(
    model_name: str,
    result: Assumption1Result,
    histogram: DisagreementHistogram,
    rho: float,
    seed: int,
) -> dict:
    return {
        "rho": rho,
        "seed": seed,
        "model": model_name,
        "status": result.status,
        "loss_aligned": result.loss_aligned,
        "loss_conflicting": result.loss_conflicting,
        "gap": result.gap,
        "disagreement_aligned": histogram.aligned_mean,
        "disagreement_conflicting": histogram.conflicting_mean,
    }


def histogram_rows(model_name: str, histogram: DisagreementHistogram, rho: float, seed: int) -> pd.DataFrame:
    return pd.DataFrame({
        "rho": rho,
        "seed": seed,
        "model": model_name,
        "bin_lo": histogram.edges[:-1],
        "bin_hi": histogram.edges[1:],
        "aligned_count": histogram.aligned_counts,
        "conflicting_count": histogram.conflicting_counts,
    })


def training_log_frame(log: TrainingLog, **identity) -> pd.DataFrame:
    """step, phase, loss, lr, then one constant column per identity key."""
    frame = log.to_frame()
    for key, value in identity.items():
        frame[key] = value
    return frame


def gap_log_frame(log: TrainingLog, **identity) -> pd.DataFrame:
    frame = pd.DataFrame(
        [(g.epoch, g.step, g.loss_aligned, g.loss_conflicting, g.gap) for g in log.gaps],
        columns=["epoch", "step", "loss_aligned", "loss_conflicting", "gap"],
    )
    for key, value in identity.items():
        frame[key] = value
    return frame


# ============================================================
# Writers
# ============================================================


def write_csv(frame: pd.DataFrame, file_path: Path, columns: Optional[list[str]] = None) -> Path:
    """
    Write a DataFrame with the fixed CSV conventions.

    Args:
        frame: Data to write
        file_path: Destination (parent directories are created)
        columns: Column order; an empty frame still gets this header

    Returns:
        The written path
    """
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    if columns is not None:
        frame = frame.reindex(columns=columns)
    frame.to_csv(file_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info("Wrote %d rows to %s", len(frame), file_path)
    return file_path


def write_metrics(rows: Iterable[MetricsRow], out_dir: Path, prefix: str = "") -> tuple[Path, Path]:
    """Write the per-seed metrics CSV and its mean/std summary."""
    frame = metrics_frame(rows)
    metrics_path = write_csv(frame, Path(out_dir) / f"{prefix}{METRICS_FILE}", METRICS_COLUMNS)
    summary_path = write_csv(summarize(frame), Path(out_dir) / f"{prefix}{SUMMARY_FILE}")
    return metrics_path, summary_path


def write_records(records: list[dict], file_path: Path, columns: list[str]) -> Path:
    return write_csv(pd.DataFrame(records, columns=columns), file_path, columns)
