"""Minimal 8-bit RGB PNG reader/writer.

The writer emits uncompressed (stored) deflate blocks so output bytes are
identical across platforms and zlib builds; corpus hashes in the test suite
depend on this. The reader handles non-interlaced 8-bit RGB/RGBA with all
five scanline filters, which covers the generated corpus plus typical
externally produced files.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, body: bytes) -> bytes:
    return (struct.pack(">I", len(body)) + tag + body
            + struct.pack(">I", zlib.crc32(tag + body)))


def _stored_zlib(data: bytes) -> bytes:
    """zlib stream using stored (uncompressed) deflate blocks only."""
    out = bytearray(b"\x78\x01")  # CMF/FLG, 32K window, check bits valid
    pos = 0
    n = len(data)
    while True:
        block = data[pos:pos + 65535]
        pos += len(block)
        final = 1 if pos >= n else 0
        out += bytes([final])
        out += struct.pack("<HH", len(block), 0xFFFF ^ len(block))
        out += block
        if final:
            break
    out += struct.pack(">I", zlib.adler32(data))
    return bytes(out)


def write_png(path: str | Path, image: np.ndarray) -> None:
    """Write an 8-bit RGB image, shape (H, W, 3) uint8."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"write_png expects (H, W, 3) uint8, got "
                         f"{img.shape} {img.dtype}")
    h, w = img.shape[:2]
    raw = bytearray()
    for row in img:
        raw += b"\x00"  # filter type 0
        raw += row.tobytes()
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    data = (_PNG_SIG + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", _stored_zlib(bytes(raw)))
            + _chunk(b"IEND", b""))
    Path(path).write_bytes(data)


def _unfilter(raw: bytes, h: int, w: int, channels: int) -> np.ndarray:
    stride = w * channels
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(h):
        ftype = raw[pos]
        pos += 1
        line = np.frombuffer(raw[pos:pos + stride], dtype=np.uint8).astype(np.int32)
        pos += stride
        if ftype == 0:
            cur = line
        elif ftype == 1:  # Sub
            cur = line.copy()
            for x in range(channels, stride):
                cur[x] = (cur[x] + cur[x - channels]) & 0xFF
        elif ftype == 2:  # Up
            cur = (line + prev) & 0xFF
        elif ftype == 3:  # Average
            cur = line.copy()
            for x in range(stride):
                left = cur[x - channels] if x >= channels else 0
                cur[x] = (cur[x] + ((left + prev[x]) >> 1)) & 0xFF
        elif ftype == 4:  # Paeth
            cur = line.copy()
            for x in range(stride):
                a = cur[x - channels] if x >= channels else 0
                b = prev[x]
                c = prev[x - channels] if x >= channels else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
                cur[x] = (cur[x] + pred) & 0xFF
        else:
            raise ValueError(f"PNG: unknown filter type {ftype}")
        out[y] = cur.astype(np.uint8)
        prev = cur
    return out.reshape(h, w, channels)


def read_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit RGB(A) PNG; returns (H, W, 3) uint8 (alpha dropped)."""
    buf = Path(path).read_bytes()
    if buf[:8] != _PNG_SIG:
        raise ValueError(f"{path}: not a PNG file")
    pos = 8
    width = height = None
    color_type = bit_depth = interlace = None
    idat = bytearray()
    while pos < len(buf):
        (length,) = struct.unpack_from(">I", buf, pos)
        tag = buf[pos + 4:pos + 8]
        body = buf[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            width, height, bit_depth, color_type, _, _, interlace = struct.unpack(
                ">IIBBBBB", body)
        elif tag == b"IDAT":
            idat += body
        elif tag == b"IEND":
            break
    if width is None:
        raise ValueError(f"{path}: missing IHDR")
    if bit_depth != 8 or color_type not in (2, 6) or interlace != 0:
        raise ValueError(
            f"{path}: unsupported PNG (need non-interlaced 8-bit RGB/RGBA, got "
            f"depth={bit_depth} color_type={color_type} interlace={interlace})")
    channels = 3 if color_type == 2 else 4
    raw = zlib.decompress(bytes(idat))
    img = _unfilter(raw, height, width, channels)
    return np.ascontiguousarray(img[:, :, :3])
