"""
Model checkpoint codec ("DPRM" files).

Layout (little-endian):
    magic "DPRM" | version u16 | layer count u32 |
    per layer: rows u32 | cols u32 | rows*cols f64 weights | rows f64 biases
"""

import struct
from pathlib import Path

import numpy as np

from app.models.network import ClassifierModel
from app.services.errors import FormatError

CHECKPOINT_MAGIC = b"DPRM"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: ClassifierModel) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(model.layers))]
    for weight, bias in model.layers:
        rows, cols = weight.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(bias, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: ClassifierModel, file_path: str) -> Path:
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


def parse_checkpoint(data: bytes, file_path: str = "<bytes>") -> ClassifierModel:
    """
    Decode checkpoint bytes.

    Raises:
        FormatError: Bad magic, unsupported version or truncated payload
    """
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("Bad checkpoint magic", offset=0, path=file_path)
    if len(data) < 10:
        raise FormatError("Truncated checkpoint header", offset=len(data), path=file_path)
    version, layer_count = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}", offset=4, path=file_path)

    offset = 10
    layers = []
    for _ in range(layer_count):
        if len(data) < offset + 8:
            raise FormatError("Truncated layer header", offset=offset, path=file_path)
        rows, cols = struct.unpack_from("<II", data, offset)
        offset += 8
        needed = 8 * (rows * cols + rows)
        if len(data) < offset + needed:
            raise FormatError("Truncated layer parameters", offset=offset, path=file_path)
        weight = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols)
        offset += 8 * rows * cols
        bias = np.frombuffer(data, dtype="<f8", count=rows, offset=offset)
        offset += 8 * rows
        layers.append((weight.astype(np.float64), bias.astype(np.float64)))

    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes", offset=offset, path=file_path)
    return ClassifierModel(layers=layers)


def load_checkpoint(file_path: str) -> ClassifierModel:
    path = Path(file_path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {file_path}")
    return parse_checkpoint(path.read_bytes(), str(path))
