"""
Empirical checks of the group-loss generalization bounds.

Both bounds assume losses bounded by C, so every loss here is min(loss, C).
Expected group losses are approximated on large generated populations.
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np

from app.models.dataset import BiasedDataset
from app.models.metrics import ALIGNED, CONFLICTING, BoundReport, MonteCarloBoundStats
from app.models.network import ClassifierModel
from app.services.errors import ConsistencyError, ParameterError, PreconditionError
from app.services.group_eval import group_losses, per_example_losses, require_both_groups

logger = logging.getLogger(__name__)

NUM_GROUPS = 2
MC_CHUNK = 1000


def _check_cap_and_delta(loss_cap: float, delta: float) -> None:
    if not (loss_cap > 0 and math.isfinite(loss_cap)):
        raise ParameterError(f"Loss cap C must be finite and > 0, got {loss_cap}")
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must be in (0, 1), got {delta}")


# ============================================================
# Concentration terms
# ============================================================


def gap_concentration_term(loss_cap: float, delta: float, group_sizes: Sequence[int]) -> float:
    """C * max_b sqrt(8 ln(|B| / delta) / n_b)."""
    _check_cap_and_delta(loss_cap, delta)
    return loss_cap * max(math.sqrt(8.0 * math.log(NUM_GROUPS / delta) / n) for n in group_sizes)


def gap_intermediate_term(loss_cap: float, delta: float, group_sizes: Sequence[int]) -> float:
    """C * sum_b sqrt(2 ln(|B| / delta) / n_b), never larger than the max form."""
    _check_cap_and_delta(loss_cap, delta)
    return loss_cap * sum(math.sqrt(2.0 * math.log(NUM_GROUPS / delta) / n) for n in group_sizes)


def average_concentration_term(loss_cap: float, delta: float, n: int) -> float:
    """C * sqrt(2 ln(1 / delta) / n)."""
    _check_cap_and_delta(loss_cap, delta)
    return loss_cap * math.sqrt(2.0 * math.log(1.0 / delta) / n)


def hoeffding_threshold(loss_cap: float, delta: float, n_b: int) -> float:
    """Per-group deviation allowed by Hoeffding with the |B| union bound."""
    _check_cap_and_delta(loss_cap, delta)
    return loss_cap * math.sqrt(2.0 * math.log(NUM_GROUPS / delta) / n_b)


# ============================================================
# Theorem reports
# ============================================================


def conflicting_prior(dataset: BiasedDataset) -> float:
    """P(conflicting) implied by the generation rho: any of M attributes misaligned."""
    return 1.0 - (1.0 - dataset.rho) ** dataset.num_bias_attrs


def population_average_loss(model: ClassifierModel, population: BiasedDataset, loss_cap: float) -> float:
    """Plain mean of capped CE losses over a population."""
    losses, _ = per_example_losses(model, population, "ce", loss_cap=loss_cap)
    return float(losses.mean())


def population_group_losses(model: ClassifierModel, population: BiasedDataset, loss_cap: float) -> dict[str, float]:
    """Capped CE group losses on a population, the stand-in for expected group losses."""
    metrics = group_losses(model, population, "ce", loss_cap=loss_cap)
    require_both_groups(metrics)
    return {name: metrics.groups[name].avg_loss for name in (ALIGNED, CONFLICTING)}


def theorem1_report(
    model: ClassifierModel,
    train: BiasedDataset,
    population: BiasedDataset,
    loss_cap: float,
    delta: float,
) -> BoundReport:
    """
    Gap bound: |L_aligned - L_conflicting| <= 2 max_b L^_b + C max_b sqrt(8 ln(2/delta) / n_b).

    Args:
        model: Model under test
        train: Sample the empirical group losses are measured on
        population: Large independent sample standing in for the group distributions
        loss_cap: C
        delta: Confidence parameter

    Raises:
        InconclusiveError: A train or population group is empty
    """
    _check_cap_and_delta(loss_cap, delta)
    train_metrics = group_losses(model, train, "ce", loss_cap=loss_cap)
    require_both_groups(train_metrics)
    expected = population_group_losses(model, population, loss_cap)

    sizes = [train_metrics.groups[ALIGNED].n, train_metrics.groups[CONFLICTING].n]
    lhs = abs(expected[ALIGNED] - expected[CONFLICTING])
    concentration = gap_concentration_term(loss_cap, delta, sizes)
    rhs = 2.0 * train_metrics.max_group_loss + concentration

    return BoundReport(
        theorem=1,
        lhs=lhs,
        rhs=rhs,
        components={
            "max_group_train_loss": train_metrics.max_group_loss,
            "concentration_term": concentration,
            "intermediate_rhs": 2.0 * train_metrics.max_group_loss + gap_intermediate_term(loss_cap, delta, sizes),
            "C": loss_cap,
            "delta": delta,
            "n": float(len(train)),
            "n_aligned": float(sizes[0]),
            "n_conflicting": float(sizes[1]),
        },
        holds=lhs <= rhs,
    )


def theorem2_report(
    model: ClassifierModel,
    train: BiasedDataset,
    population: BiasedDataset,
    loss_cap: float,
    delta: float,
    conflicting_weight: Optional[float] = None,
) -> BoundReport:
    """
    Average-loss bound: L_avg <= max_b L^_b + C sqrt(2 ln(1/delta) / n).

    L_avg is the group mixture k_a L_aligned + k_c L_conflicting of population
    group losses; k_c defaults to the conflicting prior implied by train.rho.
    """
    _check_cap_and_delta(loss_cap, delta)
    train_metrics = group_losses(model, train, "ce", loss_cap=loss_cap)
    require_both_groups(train_metrics)
    expected = population_group_losses(model, population, loss_cap)

    k_c = conflicting_prior(train) if conflicting_weight is None else conflicting_weight
    lhs = (1.0 - k_c) * expected[ALIGNED] + k_c * expected[CONFLICTING]
    concentration = average_concentration_term(loss_cap, delta, len(train))
    rhs = train_metrics.max_group_loss + concentration

    return BoundReport(
        theorem=2,
        lhs=lhs,
        rhs=rhs,
        components={
            "max_group_train_loss": train_metrics.max_group_loss,
            "concentration_term": concentration,
            "C": loss_cap,
            "delta": delta,
            "n": float(len(train)),
            "n_aligned": float(train_metrics.groups[ALIGNED].n),
            "n_conflicting": float(train_metrics.groups[CONFLICTING].n),
            "k_conflicting": k_c,
        },
        holds=lhs <= rhs,
    )


# ============================================================
# Monte-Carlo checks
# ============================================================


def hoeffding_violation_rate(
    loss_population: np.ndarray,
    n_b: int,
    loss_cap: float,
    delta: float,
    trials: int = 10_000,
    seed: int = 0,
) -> MonteCarloBoundStats:
    """
    Frequency with which a size-n_b resample mean strays from the population
    mean by more than C sqrt(2 ln(|B|/delta) / n_b).

    Raises:
        PreconditionError: Population values outside [0, C]
        ParameterError: Fewer than 1000 trials or n_b < 1
    """
    values = np.asarray(loss_population, dtype=np.float64)
    if values.size == 0 or (values < 0).any() or (values > loss_cap).any():
        raise PreconditionError(f"Population values must lie in [0, {loss_cap}]")
    if trials < 1000:
        raise ParameterError(f"Need at least 1000 trials, got {trials}")
    if n_b < 1:
        raise ParameterError(f"Sample size must be >= 1, got {n_b}")

    threshold = hoeffding_threshold(loss_cap, delta, n_b)
    mean = float(values.mean())
    rng = np.random.default_rng(seed)

    violations = 0
    for start in range(0, trials, MC_CHUNK):
        chunk = min(MC_CHUNK, trials - start)
        samples = values[rng.integers(0, values.size, size=(chunk, n_b))]
        violations += int((np.abs(samples.mean(axis=1) - mean) > threshold).sum())

    stats = MonteCarloBoundStats(trials=trials, violations=violations, delta=delta, threshold=threshold)
    logger.info(
        "Hoeffding check n_b=%d delta=%.3f: %d/%d violations (threshold %.4f)",
        n_b, delta, violations, trials, threshold,
    )
    return stats


def _half_sum_plus_half_gap(x: float, y: float) -> float:
    return (x + y) / 2.0 + abs(x - y) / 2.0


def max_identity_check(x: float, y: float) -> float:
    """
    Evaluate (x + y)/2 + |x - y|/2 and check it against max(x, y).

    The two agree to within a few ulps of max(|x|, |y|); exactly on integers.

    Raises:
        ParameterError: Non-finite input
        ConsistencyError: The identity is violated beyond rounding
    """
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ParameterError("max identity needs finite inputs")
    value = _half_sum_plus_half_gap(x, y)
    tolerance = 4.0 * np.finfo(np.float64).eps * max(abs(x), abs(y))
    if abs(value - max(x, y)) > tolerance:
        raise ConsistencyError(f"max identity violated for ({x}, {y}): got {value}")
    return value
