"""
Group-conditioned evaluation.
Per-group losses and accuracies, unbiased and worst-group accuracy,
disagreement histograms and the aligned-vs-conflicting loss diagnostic.
"""

import logging
from typing import Optional

import numpy as np

from app.models.dataset import BiasedDataset
from app.models.metrics import (
    ALIGNED,
    CONFLICTING,
    Assumption1Result,
    DisagreementHistogram,
    GroupMetrics,
    GroupStats,
)
from app.models.network import ClassifierModel
from app.services.errors import InconclusiveError, ParameterError
from app.services.nn_core import loss_and_grad, predict_logits

logger = logging.getLogger(__name__)

GROUPINGS = ("label_bias", "label_alignment")


# ============================================================
# Per-example evaluation
# ============================================================


def per_example_losses(
    model: ClassifierModel,
    dataset: BiasedDataset,
    loss_kind: str = "ce",
    q: float = 0.7,
    loss_cap: Optional[float] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Evaluate a model on every example.

    Args:
        model: Model to evaluate
        dataset: Examples
        loss_kind: 'ce' or 'gce'
        q: GCE parameter (ignored for CE)
        loss_cap: Clip losses at min(loss, C) when given

    Returns:
        (losses, predictions); predictions are argmax with lowest-index ties
    """
    logits = predict_logits(model, dataset.features)
    losses, _ = loss_and_grad(logits, dataset.y, loss_kind, q)
    if loss_cap is not None:
        if not loss_cap > 0:
            raise ParameterError(f"Loss cap must be > 0, got {loss_cap}")
        losses = np.minimum(losses, loss_cap)
    return losses, logits.argmax(axis=1)


def _cell_ids(dataset: BiasedDataset, grouping: str) -> tuple[np.ndarray, np.ndarray]:
    if grouping == "label_bias":
        keys = np.column_stack([dataset.y, dataset.bias_labels])
    elif grouping == "label_alignment":
        keys = np.column_stack([dataset.y, dataset.conflicting.astype(np.int64)])
    else:
        raise ParameterError(f"Unknown grouping '{grouping}', expected one of {GROUPINGS}")
    cells, inverse = np.unique(keys, axis=0, return_inverse=True)
    return cells, inverse.reshape(-1)


def cell_accuracies(
    predictions: np.ndarray,
    dataset: BiasedDataset,
    grouping: str = "label_bias",
) -> dict[tuple, float]:
    """Accuracy of every nonempty (label, bias) cell."""
    if len(dataset) == 0:
        return {}
    cells, inverse = _cell_ids(dataset, grouping)
    correct = (predictions == dataset.y).astype(np.float64)
    totals = np.bincount(inverse, minlength=len(cells))
    hits = np.bincount(inverse, weights=correct, minlength=len(cells))
    return {tuple(int(v) for v in cell): float(h / t) for cell, h, t in zip(cells, hits, totals)}


def metrics_from_losses(
    losses: np.ndarray,
    predictions: np.ndarray,
    dataset: BiasedDataset,
    grouping: str = "label_bias",
) -> GroupMetrics:
    """
    Aggregate per-example losses and predictions into GroupMetrics.

    The two-group indicator is "conflicting when any bias attribute is
    misaligned"; absent groups are left out rather than reported as zero.
    """
    if len(dataset) == 0:
        raise ParameterError("Cannot evaluate on an empty dataset")

    correct = predictions == dataset.y
    conflicting = dataset.conflicting
    groups = {}
    for name, mask in ((ALIGNED, ~conflicting), (CONFLICTING, conflicting)):
        n_b = int(mask.sum())
        if n_b:
            groups[name] = GroupStats(
                n=n_b,
                avg_loss=float(losses[mask].mean()),
                accuracy=float(correct[mask].mean()),
            )

    if len(groups) == 2:
        loss_gap = abs(groups[ALIGNED].avg_loss - groups[CONFLICTING].avg_loss)
    else:
        loss_gap = float("nan")

    cells = cell_accuracies(predictions, dataset, grouping)
    return GroupMetrics(
        groups=groups,
        avg_loss=float(losses.mean()),
        max_group_loss=max(g.avg_loss for g in groups.values()),
        loss_gap=loss_gap,
        unbiased_accuracy=float(correct.mean()),
        worst_group_accuracy=min(cells.values()),
        cell_accuracy=cells,
    )


# ============================================================
# Metric operations
# ============================================================


def group_losses(
    model: ClassifierModel,
    dataset: BiasedDataset,
    loss_kind: str = "ce",
    loss_cap: Optional[float] = None,
    q: float = 0.7,
    grouping: str = "label_bias",
) -> GroupMetrics:
    """Per-group average loss and accuracy, optionally with losses capped at C."""
    losses, predictions = per_example_losses(model, dataset, loss_kind, q, loss_cap)
    return metrics_from_losses(losses, predictions, dataset, grouping)


def unbiased_accuracy(model: ClassifierModel, test: BiasedDataset) -> float:
    """Overall argmax accuracy (on the rho = 0.9 test set)."""
    if len(test) == 0:
        raise ParameterError("Empty test set")
    predictions = predict_logits(model, test.features).argmax(axis=1)
    return float((predictions == test.y).mean())


def worst_group_accuracy(
    model: ClassifierModel,
    test: BiasedDataset,
    grouping: str = "label_bias",
) -> float:
    """Minimum accuracy over nonempty (label, bias) cells."""
    if len(test) == 0:
        raise ParameterError("All (label, bias) cells are empty")
    predictions = predict_logits(model, test.features).argmax(axis=1)
    return min(cell_accuracies(predictions, test, grouping).values())


# ============================================================
# Disagreement histogram
# ============================================================


def disagreement_histogram(
    biased_model: ClassifierModel,
    train: BiasedDataset,
    tau: float = 1.0,
    num_bins: int = 10,
) -> DisagreementHistogram:
    """
    Per-group histograms of the biased model's disagreement probabilities.

    Bins split [0, 1] evenly; the last bin is closed on the right.
    """
    from app.services.dpr_engine import disagreement_probs

    if num_bins < 2:
        raise ParameterError(f"num_bins must be >= 2, got {num_bins}")
    d = disagreement_probs(biased_model, train.features, train.y, tau)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    conflicting = train.conflicting

    aligned_counts, _ = np.histogram(d[~conflicting], bins=edges)
    conflicting_counts, _ = np.histogram(d[conflicting], bins=edges)
    return DisagreementHistogram(
        edges=edges,
        aligned_counts=aligned_counts,
        conflicting_counts=conflicting_counts,
        aligned_mean=float(d[~conflicting].mean()) if (~conflicting).any() else float("nan"),
        conflicting_mean=float(d[conflicting].mean()) if conflicting.any() else float("nan"),
    )


# ============================================================
# Aligned-vs-conflicting loss diagnostic
# ============================================================


def assumption_from_metrics(metrics: GroupMetrics) -> Assumption1Result:
    loss_aligned = metrics.group_loss(ALIGNED)
    loss_conflicting = metrics.group_loss(CONFLICTING)
    if loss_aligned is None or loss_conflicting is None:
        return Assumption1Result(
            status="inconclusive",
            holds=None,
            loss_aligned=loss_aligned,
            loss_conflicting=loss_conflicting,
        )
    holds = loss_aligned < loss_conflicting
    return Assumption1Result(
        status="holds" if holds else "violated",
        holds=holds,
        loss_aligned=loss_aligned,
        loss_conflicting=loss_conflicting,
    )


def check_assumption1(model: ClassifierModel, train: BiasedDataset) -> Assumption1Result:
    """
    Whether the model's CE loss on the aligned group is strictly below its
    loss on the conflicting group. An empty group yields status 'inconclusive'.
    """
    return assumption_from_metrics(group_losses(model, train, loss_kind="ce"))


def require_both_groups(metrics: GroupMetrics) -> None:
    missing = [name for name in (ALIGNED, CONFLICTING) if name not in metrics.groups]
    if missing:
        raise InconclusiveError(f"Empty group(s): {', '.join(missing)}")
