"""
IDX file parsing.
Reads (and writes, for fixtures) the big-endian MNIST-style IDX format.
"""

import gzip
import struct
from pathlib import Path

import numpy as np

from app.services.errors import FormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _read_bytes(file_path: str) -> bytes:
    """Read a file, transparently decompressing a .gz suffix."""
    path = Path(file_path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {file_path}")
    if path.suffix.lower() == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _header(data: bytes, count: int, file_path: str) -> tuple[int, ...]:
    size = 4 * count
    if len(data) < size:
        raise FormatError(f"Truncated header: expected {size} bytes", offset=len(data), path=file_path)
    return struct.unpack(f">{count}I", data[:size])


def read_idx_images(file_path: str) -> np.ndarray:
    """
    Parse an IDX3 image file.

    Format (big-endian):
        0000  u32  0x00000803 magic
        0004  u32  image count
        0008  u32  rows
        0012  u32  cols
        0016  u8[] pixels, row-major

    Returns:
        n x rows x cols uint8 array

    Raises:
        FileNotFoundError: If the file doesn't exist
        FormatError: Bad magic or truncated pixel block
    """
    data = _read_bytes(file_path)
    magic, count, rows, cols = _header(data, 4, file_path)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"Bad image magic 0x{magic:08x}", offset=0, path=file_path)

    expected = 16 + count * rows * cols
    if len(data) < expected:
        raise FormatError(
            f"Truncated pixel data: expected {expected} bytes, got {len(data)}",
            offset=len(data),
            path=file_path,
        )
    return np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def read_idx_labels(file_path: str) -> np.ndarray:
    """
    Parse an IDX1 label file (magic 0x00000801, u32 count, u8 labels).

    Returns:
        Length-n uint8 array
    """
    data = _read_bytes(file_path)
    magic, count = _header(data, 2, file_path)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"Bad label magic 0x{magic:08x}", offset=0, path=file_path)

    expected = 8 + count
    if len(data) < expected:
        raise FormatError(
            f"Truncated label data: expected {expected} bytes, got {len(data)}",
            offset=len(data),
            path=file_path,
        )
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=8).copy()


def read_idx_pair(image_file: str, label_file: str) -> tuple[np.ndarray, np.ndarray]:
    """
    Read matching image/label files.

    Returns:
        (n x rows x cols float64 intensities in [0, 1], n int64 labels)
    """
    images = read_idx_images(image_file)
    labels = read_idx_labels(label_file)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"Image count {images.shape[0]} != label count {labels.shape[0]}",
            offset=4,
            path=label_file,
        )
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx_images(file_path: str, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(file_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGE_MAGIC, count, rows, cols))
        f.write(images.tobytes(order="C"))


def write_idx_labels(file_path: str, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(file_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())
