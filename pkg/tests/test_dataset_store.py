"""
Tests for dataset_store service.
"""

import struct

import numpy as np
import pytest

from app.models.dataset import DatasetKind, GenConfig
from app.services.biased_data import generate_colored, generate_multibias
from app.services.dataset_store import (
    HEADER_SIZE,
    dataset_bytes,
    expected_file_size,
    load_dataset,
    parse_dataset,
    save_dataset,
)
from app.services.errors import FormatError


def colored_dataset(n: int = 30, rho: float = 0.2):
    return generate_colored(GenConfig(kind=DatasetKind.COLORED, rho=rho, image_size=8), n, seed=3)


class TestDatasetStore:
    """Tests for the DPRD dataset codec."""

    def test_save_and_load_bitwise(self, tmp_path):
        """A saved dataset reads back with identical arrays and metadata."""
        ds = colored_dataset()
        path = save_dataset(ds, str(tmp_path / "train.dprd"))
        loaded = load_dataset(str(path))

        assert np.array_equal(loaded.features, ds.features)
        assert np.array_equal(loaded.y, ds.y)
        assert np.array_equal(loaded.bias_labels, ds.bias_labels)
        assert np.array_equal(loaded.aligned, ds.aligned)
        assert (loaded.num_classes, loaded.rho, loaded.seed) == (10, 0.2, 3)
        assert loaded.image_shape == (8, 8, 3)
        assert loaded.kind == DatasetKind.COLORED

    def test_file_size_matches_header_arithmetic(self, tmp_path):
        """File size equals header plus n fixed-size records."""
        ds = colored_dataset(n=17)
        path = save_dataset(ds, str(tmp_path / "d.dprd"))
        assert path.stat().st_size == expected_file_size(17, 8 * 8 * 3, 1)
        assert expected_file_size(17, 192, 1) == HEADER_SIZE + 17 * (4 + 8 * 192 + 2 + 3)

    def test_multibias(self):
        """Multi-attribute records keep every bias label and flag."""
        config = GenConfig(kind=DatasetKind.MULTIBIAS, rho=0.3, num_bias_attrs=3, image_size=8)
        ds = generate_multibias(config, 25, seed=1)
        loaded = parse_dataset(dataset_bytes(ds))

        assert loaded.num_bias_attrs == 3
        assert loaded.image_shape is None
        assert np.array_equal(loaded.aligned, ds.aligned)
        assert np.array_equal(loaded.features, ds.features)

    def test_rho_echo(self):
        """The header carries rho exactly."""
        data = dataset_bytes(colored_dataset(rho=0.005))
        assert struct.unpack_from("<d", data, 10)[0] == 0.005

    def test_bad_magic(self):
        """Wrong magic raises FormatError."""
        data = bytearray(dataset_bytes(colored_dataset(n=2)))
        data[:4] = b"NOPE"
        with pytest.raises(FormatError, match="magic"):
            parse_dataset(bytes(data))

    def test_truncated(self):
        """Missing record bytes raise FormatError with an offset."""
        data = dataset_bytes(colored_dataset(n=3))
        with pytest.raises(FormatError, match="Expected") as info:
            parse_dataset(data[:-10])
        assert info.value.offset == len(data) - 10

    def test_ragged_lengths(self):
        """A record declaring another feature length is rejected."""
        ds = colored_dataset(n=3)
        data = bytearray(dataset_bytes(ds))
        record_size = expected_file_size(1, ds.feature_dim, 1) - HEADER_SIZE
        struct.pack_into("<I", data, HEADER_SIZE + record_size, 5)
        with pytest.raises(FormatError, match="differ"):
            parse_dataset(bytes(data))

    def test_missing_file(self):
        """Missing dataset files raise FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            load_dataset("/nonexistent/data.dprd")
