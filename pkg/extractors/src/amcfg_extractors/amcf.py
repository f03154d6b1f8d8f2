"""Writer/reader for the AMCF binary matrix format.

This is the wire format consumed by the pipeline's dataset loader:
magic "AMCF", version byte 1, dtype byte 1 (float32), two reserved zero
bytes, uint32-LE n_rows and n_cols, then row-major float32-LE values.
Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AMCF"
HEADER = struct.Struct("<4sBBxxII")


class AmcfError(Exception):
    pass


def write_matrix(data: np.ndarray, path: str | Path) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] == 0:
        raise AmcfError(f"need a non-empty 2-D matrix, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise AmcfError("matrix contains non-finite values")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, 1, 1, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())
    tmp.replace(path)


def read_matrix(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise AmcfError(f"{path}: shorter than the {HEADER.size}-byte header")
    magic, version, dtype_code, n_rows, n_cols = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise AmcfError(f"{path}: bad magic {magic!r}")
    if version != 1 or dtype_code != 1:
        raise AmcfError(f"{path}: unsupported version/dtype {version}/{dtype_code}")
    expected = HEADER.size + 4 * n_rows * n_cols
    if len(raw) != expected:
        raise AmcfError(f"{path}: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER.size)
    return data.reshape(n_rows, n_cols).copy()
