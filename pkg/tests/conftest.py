"""
Shared test helpers.
"""

from typing import Optional

import numpy as np
import pytest

from app.models.dataset import BiasedDataset, DatasetKind


def make_dataset(
    y,
    bias_labels,
    features: Optional[np.ndarray] = None,
    num_classes: int = 2,
    rho: float = 0.5,
) -> BiasedDataset:
    """Hand-built dataset; alignment is derived from (y, bias label)."""
    y = np.asarray(y, dtype=np.int64)
    bias = np.asarray(bias_labels, dtype=np.int64)
    if bias.ndim == 1:
        bias = bias[:, None]
    if features is None:
        features = np.arange(len(y), dtype=np.float64)[:, None]
    return BiasedDataset(
        features=np.asarray(features, dtype=np.float64),
        y=y,
        bias_labels=bias,
        aligned=bias == y[:, None],
        num_classes=num_classes,
        rho=rho,
        seed=0,
        kind=DatasetKind.MULTIBIAS if bias.shape[1] > 1 else DatasetKind.COLORED,
    )


@pytest.fixture
def dataset_factory():
    return make_dataset
