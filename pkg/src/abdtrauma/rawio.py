"""Little-endian raw array files and canonical JSON output."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from abdtrauma.errors import ContractError, StorageError


def write_raw(path, array: np.ndarray, dtype: str) -> None:
    data = np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<"))
    try:
        Path(path).write_bytes(data.tobytes(order="C"))
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_raw(path, dtype: str, shape) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    dt = np.dtype(dtype).newbyteorder("<")
    expected = int(np.prod(shape)) * dt.itemsize
    if len(buf) != expected:
        raise ContractError(f"{path}: expected {expected} bytes for shape {tuple(shape)}, found {len(buf)}")
    return np.frombuffer(buf, dtype=dt).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def dump_json(path, obj) -> None:
    """Write JSON with sorted keys so identical content gives identical bytes."""
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
