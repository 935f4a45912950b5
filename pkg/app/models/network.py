"""
Network parameter containers.
A ClassifierModel plays both roles: the biased model and the debiased model.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from app.services.errors import ParameterError, ShapeError


Layer = tuple[np.ndarray, np.ndarray]


@dataclass
class ClassifierModel:
    """Dense network: weights are [out x in], biases are [out]."""

    layers: list[Layer]
    activation: str = "relu"

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("Model needs at least one layer")
        if self.activation != "relu":
            raise ParameterError(f"Unsupported activation: {self.activation}")

        previous_out = None
        for idx, (weight, bias) in enumerate(self.layers):
            if weight.ndim != 2 or bias.ndim != 1:
                raise ShapeError(f"Layer {idx}: weight must be 2-D and bias 1-D")
            if bias.shape[0] != weight.shape[0]:
                raise ShapeError(
                    f"Layer {idx}: bias length {bias.shape[0]} != weight rows {weight.shape[0]}"
                )
            if previous_out is not None and weight.shape[1] != previous_out:
                raise ShapeError(
                    f"Layer {idx}: input size {weight.shape[1]} != previous output size {previous_out}"
                )
            previous_out = weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [weight.shape[0] for weight, _ in self.layers]

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in self.layers)


@dataclass
class GradientBuffer:
    """Per-parameter partial derivatives, shape-congruent with a model."""

    layers: list[Layer]

    @classmethod
    def zeros_like(cls, model: ClassifierModel) -> "GradientBuffer":
        return cls([(np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers])

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in self.layers)

    def matches(self, model: ClassifierModel) -> bool:
        if len(self.layers) != len(model.layers):
            return False
        return all(
            gw.shape == w.shape and gb.shape == b.shape
            for (gw, gb), (w, b) in zip(self.layers, model.layers)
        )


@dataclass
class OptimizerState:
    """Momentum SGD hyperparameters plus velocity buffers."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_factor: float = 1.0
    lr_decay_period: Optional[int] = None
    velocity: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lr_decay_period is not None and self.lr_decay_period < 1:
            raise ParameterError(f"lr_decay_period must be >= 1, got {self.lr_decay_period}")

    @classmethod
    def for_model(cls, model: ClassifierModel, learning_rate: float, **kwargs) -> "OptimizerState":
        """Build an optimizer state with zero velocity for the given model."""
        state = cls(learning_rate=learning_rate, **kwargs)
        state.velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers]
        return state

    def lr_at(self, step_index: int) -> float:
        """Step-schedule learning rate for a 0-based step index."""
        if not self.lr_decay_period:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (step_index // self.lr_decay_period)
