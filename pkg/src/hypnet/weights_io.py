"""Binary weights file.

Layout, all integers unsigned 32-bit little-endian::

    b"HYPN" | version | tensor count |
    per tensor: name length | UTF-8 name | rank | dims... | float32 LE data

Tensors are written in ``HypNetWeights.state()`` order (parameters, then
batch-norm running statistics).
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .model import DEFAULT_ARCH, HypNetWeights, init_weights

MAGIC = b"HYPN"
VERSION = 1
_U32 = struct.Struct("<I")


class WeightsFormatError(ValueError):
    pass


def _write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(_U32.pack(value))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise WeightsFormatError("truncated weights file")
    return data


def _read_u32(fh: BinaryIO) -> int:
    return _U32.unpack(_read_exact(fh, 4))[0]


def write_tensors(fh: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    _write_u32(fh, VERSION)
    _write_u32(fh, len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        _write_u32(fh, len(raw))
        fh.write(raw)
        arr = np.asarray(arr)
        _write_u32(fh, arr.ndim)
        for d in arr.shape:
            _write_u32(fh, d)
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    """Parse a weights stream; the header is validated before any tensor is read."""
    if fh.read(4) != MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    version = _read_u32(fh)
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights format version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(_read_u32(fh)):
        name = _read_exact(fh, _read_u32(fh)).decode("utf-8")
        shape = tuple(_read_u32(fh) for _ in range(_read_u32(fh)))
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if fh.read(1):
        raise WeightsFormatError("trailing bytes after last tensor")
    return out


def save_weights(path: Path, weights: HypNetWeights) -> None:
    buf = io.BytesIO()
    write_tensors(buf, weights.state())
    Path(path).write_bytes(buf.getvalue())


def load_weights(path: Path, dtype=np.float32) -> HypNetWeights:
    """Rebuild weights from a file; the hypernetwork layout is inferred from tensor names."""
    with open(path, "rb") as fh:
        tensors = read_tensors(fh)
    arch = DEFAULT_ARCH if any(n.startswith("hyper") for n in tensors) else DEFAULT_ARCH.without_hyper()
    weights = init_weights(0, arch, dtype=dtype)
    weights.load_state(tensors)
    return weights
