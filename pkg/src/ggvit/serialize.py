"""GGT1 tensor serialization and the named-tensor checkpoint container.

GGT1 record layout (little-endian throughout):
    magic  'G' 'G' 'T' '1'
    u8     dtype tag (0 = float32, 1 = float64)
    u8     rank
    u32*r  dims
    f32/f64*  payload, row-major

Checkpoints concatenate named GGT1 records behind a JSON index mapping
name -> byte offset (relative to the payload section), plus a free-form
meta JSON object for configs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

GGT1_MAGIC = b"GGT1"
GGCK_MAGIC = b"GGCK1\n"

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def ggt1_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if not arr.flags["C_CONTIGUOUS"]:  # 0-d stays 0-d (ascontiguousarray would not)
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_TAGS:
        raise ValueError(f"GGT1 supports float32/float64, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("GGT1 rank limit is 255")
    header = GGT1_MAGIC + struct.pack(
        "<BB", _DTYPE_TAGS[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return header + payload


def ggt1_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one GGT1 record at ``offset``; returns (array, next_offset)."""
    if buf[offset:offset + 4] != GGT1_MAGIC:
        raise ValueError("not a GGT1 record (bad magic)")
    tag, rank = struct.unpack_from("<BB", buf, offset + 4)
    if tag not in _TAG_DTYPES:
        raise ValueError(f"GGT1: unknown dtype tag {tag}")
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 6)
    dtype = _TAG_DTYPES[tag]
    start = offset + 6 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise ValueError("GGT1: truncated payload")
    arr = np.frombuffer(buf[start:end], dtype=dtype).reshape(dims)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True), end


def write_ggt1(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(ggt1_bytes(arr))


def read_ggt1(path: str | Path) -> np.ndarray:
    arr, _ = ggt1_from_bytes(Path(path).read_bytes())
    return arr


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Write a GGCK container: meta JSON, name->offset index, GGT1 payload."""
    records = []
    index: dict[str, int] = {}
    pos = 0
    for name in sorted(tensors):
        rec = ggt1_bytes(np.asarray(tensors[name]))
        index[name] = pos
        records.append(rec)
        pos += len(rec)
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    index_b = json.dumps(index, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(GGCK_MAGIC)
        f.write(struct.pack("<QQ", len(meta_b), len(index_b)))
        f.write(meta_b)
        f.write(index_b)
        for rec in records:
            f.write(rec)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:len(GGCK_MAGIC)] != GGCK_MAGIC:
        raise ValueError(f"{path}: not a GGCK checkpoint")
    off = len(GGCK_MAGIC)
    meta_len, index_len = struct.unpack_from("<QQ", buf, off)
    off += 16
    meta = json.loads(buf[off:off + meta_len])
    off += meta_len
    index = json.loads(buf[off:off + index_len])
    off += index_len
    tensors = {}
    for name, rel in index.items():
        arr, _ = ggt1_from_bytes(buf, off + rel)
        tensors[name] = arr
    return tensors, meta
