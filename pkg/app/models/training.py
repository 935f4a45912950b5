"""
Training schedule, sampling table and training log types.
"""

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from app.services.errors import ConsistencyError


class TrainSchedule(BaseModel):
    """Hyperparameters for the biased, debiased, reweighted and ERM phases."""

    model_config = ConfigDict(extra="forbid")

    biased_iters: int = Field(3000, ge=0)
    debiased_iters: int = Field(1000, ge=0)
    batch_size: int = Field(128, ge=1)

    learning_rate: float = Field(0.02, gt=0.0)
    # Second-phase (debiased, reweighted, ERM) rate; None reuses learning_rate
    debiased_learning_rate: Optional[float] = Field(0.005, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-3, ge=0.0)
    lr_decay_factor: float = Field(0.1, gt=0.0, le=1.0)
    lr_decay_period: Optional[int] = Field(1200, ge=1)

    q: float = Field(0.7, gt=0.0, le=1.0)
    tau: float = Field(1.0, gt=0.0)
    hidden_width: int = Field(128, ge=1)

    use_gce: bool = True
    init_from_biased: bool = True
    augment: bool = True
    augment_baselines: bool = False
    jitter_strength: float = Field(0.4, ge=0.0, lt=1.0)
    max_rotation_deg: float = Field(15.0, ge=0.0, le=180.0)
    resize_crop_scale: Optional[float] = Field(None, gt=0.0, le=1.0)

    sampler: Literal["cdf", "alias"] = "cdf"
    log_every: int = Field(10, ge=1)
    monitor_group_gap: bool = True
    select_best_on_val: bool = False


@dataclass
class SamplingTable:
    """Per-example sampling probabilities built from disagreement probabilities."""

    probs: np.ndarray
    per_example_disagreement: np.ndarray
    marginal: float
    tau: float = 1.0

    def __len__(self) -> int:
        return int(self.probs.shape[0])

    def validate(self) -> None:
        """Re-check the normalization and proportionality identities."""
        if self.probs.shape != self.per_example_disagreement.shape:
            raise ConsistencyError("probs and disagreement vectors differ in length")
        if (self.probs < 0).any():
            raise ConsistencyError("Negative sampling probability")
        if abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ConsistencyError(f"Sampling probabilities sum to {self.probs.sum():.12f}")
        d = self.per_example_disagreement
        if ((d < 0) | (d > 1)).any():
            raise ConsistencyError("Disagreement probability outside [0, 1]")
        expected = d / d.sum()
        if np.max(np.abs(expected - self.probs)) > 1e-12:
            raise ConsistencyError("probs are not proportional to disagreement")

    def dataset_weights(self) -> np.ndarray:
        """n * probs: the per-example weights of the reweighting variant."""
        return len(self) * self.probs


@dataclass
class LogEntry:
    step: int
    phase: str
    loss: float
    lr: float


@dataclass
class GapEntry:
    epoch: int
    step: int
    loss_aligned: float
    loss_conflicting: float

    @property
    def gap(self) -> float:
        return self.loss_conflicting - self.loss_aligned


@dataclass
class TrainingLog:
    entries: list[LogEntry] = field(default_factory=list)
    gaps: list[GapEntry] = field(default_factory=list)
    val_accuracy: list[tuple[int, float]] = field(default_factory=list)
    best_step: Optional[int] = None

    def record(self, step: int, phase: str, loss: float, lr: float) -> None:
        self.entries.append(LogEntry(step=step, phase=phase, loss=loss, lr=lr))

    def extend(self, other: "TrainingLog") -> None:
        self.entries.extend(other.entries)
        self.gaps.extend(other.gaps)
        self.val_accuracy.extend(other.val_accuracy)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(e.step, e.phase, e.loss, e.lr) for e in self.entries],
            columns=["step", "phase", "loss", "lr"],
        )
