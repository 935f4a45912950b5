"""
Dataset types with controlled spurious correlations.
"""

import colorsys
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from app.services.errors import ShapeError


# Ten well separated colors on the RGB cube, one per class.
DEFAULT_COLOR_TABLE = [
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.5, 0.0),
    (0.5, 0.0, 1.0),
    (0.0, 0.5, 0.25),
    (0.6, 0.6, 0.6),
]


class DatasetKind(str, Enum):
    COLORED = "colored"
    MULTIBIAS = "multibias"
    COLORIZED_IDX = "colorized-idx"


class GenConfig(BaseModel):
    """Generator parameters for the synthetic datasets."""

    kind: DatasetKind = DatasetKind.COLORED
    num_classes: int = 10
    num_bias_attrs: int = 1
    rho: float = Field(0.01, ge=0.0, le=1.0)
    sigma: float = Field(1e-4, ge=0.0)
    color_prototypes: Optional[list[tuple[float, float, float]]] = None
    image_size: int = Field(14, ge=8)
    glyph_jitter: int = Field(1, ge=0, le=2)

    @model_validator(mode="after")
    def check_prototypes(self) -> "GenConfig":
        if self.color_prototypes is not None:
            if len(self.color_prototypes) != self.num_classes:
                raise ValueError(
                    f"Expected {self.num_classes} color prototypes, got {len(self.color_prototypes)}"
                )
            for color in self.color_prototypes:
                if any(c < 0.0 or c > 1.0 for c in color):
                    raise ValueError(f"Color prototype {color} outside [0, 1]^3")
            if len(set(self.color_prototypes)) != len(self.color_prototypes):
                raise ValueError("Color prototypes must be pairwise distinct")
        return self

    def prototypes(self) -> np.ndarray:
        """K x 3 array of class color prototypes."""
        if self.color_prototypes is not None:
            return np.asarray(self.color_prototypes, dtype=np.float64)
        if self.num_classes <= len(DEFAULT_COLOR_TABLE):
            return np.asarray(DEFAULT_COLOR_TABLE[: self.num_classes], dtype=np.float64)
        # Evenly spaced hues once the fixed table runs out
        return np.asarray(
            [colorsys.hsv_to_rgb(k / self.num_classes, 1.0, 1.0) for k in range(self.num_classes)],
            dtype=np.float64,
        )

    def with_rho(self, rho: float) -> "GenConfig":
        return self.model_copy(update={"rho": rho})


@dataclass(frozen=True)
class BiasedExample:
    features: np.ndarray
    y: int
    bias_labels: tuple[int, ...]
    aligned: tuple[bool, ...]


@dataclass
class BiasedDataset:
    """
    Column-oriented dataset.

    features: n x d float64, y: n, bias_labels: n x M, aligned: n x M.
    image_shape is (H, W, 3) when features are flattened channel-last images.
    """

    features: np.ndarray
    y: np.ndarray
    bias_labels: np.ndarray
    aligned: np.ndarray
    num_classes: int
    rho: float
    seed: int
    image_shape: Optional[tuple[int, int, int]] = None
    kind: DatasetKind = DatasetKind.COLORED

    def __post_init__(self):
        n = self.y.shape[0]
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ShapeError(f"features must be {n} x d, got {self.features.shape}")
        if self.bias_labels.ndim != 2 or self.bias_labels.shape[0] != n:
            raise ShapeError(f"bias_labels must be {n} x M, got {self.bias_labels.shape}")
        if self.aligned.shape != self.bias_labels.shape:
            raise ShapeError("aligned flags must match bias_labels shape")
        if self.image_shape is not None and int(np.prod(self.image_shape)) != self.features.shape[1]:
            raise ShapeError(
                f"image_shape {self.image_shape} does not match feature length {self.features.shape[1]}"
            )

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def __getitem__(self, index: int) -> BiasedExample:
        return BiasedExample(
            features=self.features[index],
            y=int(self.y[index]),
            bias_labels=tuple(int(v) for v in self.bias_labels[index]),
            aligned=tuple(bool(v) for v in self.aligned[index]),
        )

    @property
    def examples(self) -> list[BiasedExample]:
        return [self[i] for i in range(len(self))]

    @property
    def num_bias_attrs(self) -> int:
        return int(self.bias_labels.shape[1])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def conflicting(self) -> np.ndarray:
        """Two-group indicator: conflicting when any bias attribute is misaligned."""
        return ~self.aligned.all(axis=1)

    def subset(self, indices: np.ndarray) -> "BiasedDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return BiasedDataset(
            features=self.features[indices],
            y=self.y[indices],
            bias_labels=self.bias_labels[indices],
            aligned=self.aligned[indices],
            num_classes=self.num_classes,
            rho=self.rho,
            seed=self.seed,
            image_shape=self.image_shape,
            kind=self.kind,
        )
