"""Binary tensor container.

Layout (all integers little-endian):
  magic ``QBTC`` | version u32 | tensor count u32
  per tensor: name length u32, UTF-8 name, rank u32, dims u64 each,
  dtype tag u32 (0 = float32, 1 = float64, 2 = uint16 codes), raw
  little-endian payload in C order.

Quantized weights ride along as uint16 code tensors plus a JSON sidecar
(``<path>.quant.json``) describing bits and per-group clipping ranges;
the container itself stays dtype-dumb.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"QBTC"
VERSION = 1

_DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<u2"): 2,
}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u2")}


class CheckpointError(ValueError):
    """Malformed or truncated container."""


def save_tensors(path, tensors: dict) -> None:
    """Write named arrays. Dtypes must be float32, float64 or uint16."""
    path = Path(path)
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.ndim:  # ascontiguousarray would promote rank 0 to rank 1
            arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        nb = name.encode("utf-8")
        head = struct.pack("<I", len(nb)) + nb
        head += struct.pack("<I", arr.ndim)
        head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
        head += struct.pack("<I", _DTYPE_TAGS[dt])
        blobs.append(head + arr.astype(dt, copy=False).tobytes(order="C"))
    payload = MAGIC + struct.pack("<II", VERSION, len(tensors)) + b"".join(blobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError("truncated container")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_tensors(path) -> dict:
    path = Path(path)
    r = _Reader(path.read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    count = r.u32()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        tag = r.u32()
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag}")
        dt = _TAG_DTYPES[tag]
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        out[name] = arr.copy()
    if r.off != len(r.buf):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def sidecar_path(path) -> Path:
    return Path(str(path) + ".quant.json")


def save_quantized(path, codes: dict, meta: dict) -> None:
    """Write code tensors plus the JSON sidecar describing their ranges."""
    save_tensors(path, codes)
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_quantized(path) -> tuple[dict, dict]:
    codes = load_tensors(path)
    sp = sidecar_path(path)
    if not sp.exists():
        raise CheckpointError(f"missing quantization sidecar {sp}")
    return codes, json.loads(sp.read_text())
