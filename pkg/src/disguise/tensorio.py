"""Binary tensor (DTNS) and weight archive (DWGT) formats, plus 8-bit PNG.

DTNS: ``b"DTNS"``, version byte ``0x01``, rank byte, ``rank`` little-endian
u32 dims, then float32 little-endian data in row-major order.

DWGT: ``b"DWGT"``, version byte ``0x01``, u32 tensor count, then for each
tensor a u16 name length, the UTF-8 name, and a DTNS body.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

DTNS_MAGIC = b"DTNS"
DWGT_MAGIC = b"DWGT"
VERSION = 1


class FormatError(ValueError):
    """Malformed or truncated file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_dtns(x) -> bytes:
    arr = np.ascontiguousarray(np.asarray(x, dtype="<f4"))
    if not 1 <= arr.ndim <= 4:
        raise ValueError(f"DTNS supports rank 1-4, got rank {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise ValueError(f"DTNS dims must be >= 1, got {arr.shape}")
    head = DTNS_MAGIC + bytes([VERSION, arr.ndim]) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _need(buf: bytes, pos: int, n: int, what: str) -> None:
    if pos + n > len(buf):
        raise FormatError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", pos)


def decode_dtns(buf: bytes, pos: int = 0) -> tuple[np.ndarray, int]:
    """Parse one DTNS tensor starting at ``pos``; returns ``(array, end)``."""
    _need(buf, pos, 6, "DTNS header")
    if buf[pos: pos + 4] != DTNS_MAGIC:
        raise FormatError(f"bad DTNS magic {buf[pos: pos + 4]!r}", pos)
    if buf[pos + 4] != VERSION:
        raise FormatError(f"unsupported DTNS version {buf[pos + 4]}", pos + 4)
    rank = buf[pos + 5]
    if not 1 <= rank <= 4:
        raise FormatError(f"invalid DTNS rank {rank}", pos + 5)
    pos += 6
    _need(buf, pos, 4 * rank, "DTNS dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    if any(d < 1 for d in dims):
        raise FormatError(f"invalid DTNS dims {dims}", pos)
    pos += 4 * rank
    nbytes = 4 * int(np.prod(dims))
    _need(buf, pos, nbytes, "DTNS data")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
    return arr.astype(np.float32), pos + nbytes


def write_dtns(path, x) -> None:
    Path(path).write_bytes(encode_dtns(x))


def read_dtns(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_dtns(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after DTNS tensor", end)
    return arr


def encode_dwgt(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [DWGT_MAGIC, bytes([VERSION]), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(encode_dtns(arr))
    return b"".join(parts)


def decode_dwgt(buf: bytes) -> dict[str, np.ndarray]:
    _need(buf, 0, 9, "DWGT header")
    if buf[:4] != DWGT_MAGIC:
        raise FormatError(f"bad DWGT magic {buf[:4]!r}", 0)
    if buf[4] != VERSION:
        raise FormatError(f"unsupported DWGT version {buf[4]}", 4)
    (count,) = struct.unpack_from("<I", buf, 5)
    pos = 9
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        _need(buf, pos, 2, "tensor name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        _need(buf, pos, nlen, "tensor name")
        try:
            name = buf[pos: pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8", pos) from exc
        pos += nlen
        out[name], pos = decode_dtns(buf, pos)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after DWGT archive", pos)
    return out


def write_png(path, img) -> None:
    """Quantize an ``(H, W, 3)`` image in [0, 1] to 8-bit RGB."""
    from PIL import Image

    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PNG export needs (H, W, 3), got {arr.shape}")
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Load an 8-bit image as float32 RGB with byte ``b`` mapped to ``b / 255``."""
    from PIL import Image

    with Image.open(path) as im:
        q = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (q.astype(np.float32) / np.float32(255.0)).astype(np.float32)
