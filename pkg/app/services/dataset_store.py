"""
Native dataset codec ("DPRD" files).

Header (little-endian, 35 bytes):
    magic "DPRD" | version u16 | K u16 | M u16 | rho f64 | n u32 |
    seed u64 | image rows u16 | image cols u16 | kind u8
Image rows/cols are 0 for non-image feature layouts.

Records, one per example:
    feature length u32 | f64 features | y u16 | M x (bias label u16, aligned u8)
"""

import struct
from pathlib import Path

import numpy as np

from app.models.dataset import BiasedDataset, DatasetKind
from app.services.errors import FormatError

DATASET_MAGIC = b"DPRD"
DATASET_VERSION = 1
HEADER_FORMAT = "<4sHHHdIQHHB"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)

KIND_CODES = {
    DatasetKind.COLORED: 0,
    DatasetKind.MULTIBIAS: 1,
    DatasetKind.COLORIZED_IDX: 2,
}
KINDS_BY_CODE = {code: kind for kind, code in KIND_CODES.items()}


def _record_dtype(feature_dim: int, num_attrs: int) -> np.dtype:
    return np.dtype([
        ("length", "<u4"),
        ("features", "<f8", (feature_dim,)),
        ("y", "<u2"),
        ("bias", [("label", "<u2"), ("aligned", "u1")], (num_attrs,)),
    ])


def expected_file_size(n: int, feature_dim: int, num_attrs: int) -> int:
    return HEADER_SIZE + n * (4 + 8 * feature_dim + 2 + 3 * num_attrs)


def dataset_bytes(dataset: BiasedDataset) -> bytes:
    rows, cols = (dataset.image_shape[0], dataset.image_shape[1]) if dataset.image_shape else (0, 0)
    header = struct.pack(
        HEADER_FORMAT,
        DATASET_MAGIC,
        DATASET_VERSION,
        dataset.num_classes,
        dataset.num_bias_attrs,
        float(dataset.rho),
        len(dataset),
        int(dataset.seed) & 0xFFFFFFFFFFFFFFFF,
        rows,
        cols,
        KIND_CODES[dataset.kind],
    )

    records = np.zeros(len(dataset), dtype=_record_dtype(dataset.feature_dim, dataset.num_bias_attrs))
    records["length"] = dataset.feature_dim
    records["features"] = dataset.features
    records["y"] = dataset.y
    records["bias"]["label"] = dataset.bias_labels
    records["bias"]["aligned"] = dataset.aligned
    return header + records.tobytes()


def save_dataset(dataset: BiasedDataset, file_path: str) -> Path:
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dataset_bytes(dataset))
    return path


def parse_dataset(data: bytes, file_path: str = "<bytes>") -> BiasedDataset:
    """
    Decode dataset bytes.

    Raises:
        FormatError: Bad magic/version, truncated records or ragged feature lengths
    """
    if len(data) < HEADER_SIZE:
        raise FormatError("Truncated dataset header", offset=len(data), path=file_path)
    magic, version, k, m, rho, n, seed, rows, cols, kind_code = struct.unpack_from(HEADER_FORMAT, data, 0)
    if magic != DATASET_MAGIC:
        raise FormatError("Bad dataset magic", offset=0, path=file_path)
    if version != DATASET_VERSION:
        raise FormatError(f"Unsupported dataset version {version}", offset=4, path=file_path)
    if kind_code not in KINDS_BY_CODE:
        raise FormatError(f"Unknown dataset kind {kind_code}", offset=HEADER_SIZE - 1, path=file_path)

    if n == 0:
        feature_dim = rows * cols * 3 if rows else 0
    else:
        if len(data) < HEADER_SIZE + 4:
            raise FormatError("Missing first record", offset=HEADER_SIZE, path=file_path)
        (feature_dim,) = struct.unpack_from("<I", data, HEADER_SIZE)

    expected = expected_file_size(n, feature_dim, m)
    if len(data) != expected:
        raise FormatError(
            f"Expected {expected} bytes for {n} records, got {len(data)}",
            offset=min(len(data), expected),
            path=file_path,
        )

    records = np.frombuffer(data, dtype=_record_dtype(feature_dim, m), count=n, offset=HEADER_SIZE)
    ragged = np.flatnonzero(records["length"] != feature_dim)
    if ragged.size:
        record_size = expected_file_size(1, feature_dim, m) - HEADER_SIZE
        raise FormatError(
            "Feature lengths differ between records",
            offset=HEADER_SIZE + int(ragged[0]) * record_size,
            path=file_path,
        )

    return BiasedDataset(
        features=records["features"].astype(np.float64).reshape(n, feature_dim),
        y=records["y"].astype(np.int64),
        bias_labels=records["bias"]["label"].astype(np.int64).reshape(n, m),
        aligned=records["bias"]["aligned"].astype(bool).reshape(n, m),
        num_classes=k,
        rho=rho,
        seed=seed,
        image_shape=(rows, cols, 3) if rows else None,
        kind=KINDS_BY_CODE[kind_code],
    )


def load_dataset(file_path: str) -> BiasedDataset:
    path = Path(file_path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {file_path}")
    return parse_dataset(path.read_bytes(), str(path))
