"""
Evaluation and bound-verification result types.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


ALIGNED = "aligned"
CONFLICTING = "conflicting"


@dataclass
class GroupStats:
    n: int
    avg_loss: float
    accuracy: float


@dataclass
class GroupMetrics:
    """
    Group-conditioned metrics of one model on one dataset.

    groups only holds nonempty groups; loss_gap is NaN unless both are present.
    """

    groups: dict[str, GroupStats]
    avg_loss: float
    max_group_loss: float
    loss_gap: float
    unbiased_accuracy: float
    worst_group_accuracy: float
    cell_accuracy: dict[tuple, float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return sum(g.n for g in self.groups.values())

    def group_loss(self, name: str) -> Optional[float]:
        stats = self.groups.get(name)
        return stats.avg_loss if stats else None

    def group_accuracy(self, name: str) -> Optional[float]:
        stats = self.groups.get(name)
        return stats.accuracy if stats else None


@dataclass
class DisagreementHistogram:
    edges: np.ndarray
    aligned_counts: np.ndarray
    conflicting_counts: np.ndarray
    aligned_mean: float
    conflicting_mean: float


@dataclass
class Assumption1Result:
    """status is 'holds', 'violated' or 'inconclusive'; holds is None when inconclusive."""

    status: str
    holds: Optional[bool]
    loss_aligned: Optional[float]
    loss_conflicting: Optional[float]

    @property
    def gap(self) -> Optional[float]:
        if self.loss_aligned is None or self.loss_conflicting is None:
            return None
        return self.loss_conflicting - self.loss_aligned


@dataclass
class BoundReport:
    theorem: int
    lhs: float
    rhs: float
    components: dict[str, float]
    holds: bool


@dataclass
class MonteCarloBoundStats:
    trials: int
    violations: int
    delta: float
    threshold: float

    @property
    def violation_rate(self) -> float:
        return self.violations / self.trials
