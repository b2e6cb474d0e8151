"""RTF1 raw tensor records.

Layout: ``b"RTF1"``, one dtype tag byte (0x04 float32, 0x08 float64), u32 LE
rank, ``rank`` u32 LE extents, then the row-major little-endian payload.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RTF1"
_TAGS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class RTFError(ValueError):
    pass


def encode(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.dtype == np.float32:
        tag, dt = 4, _TAGS[4]
    elif t.dtype == np.float64:
        tag, dt = 8, _TAGS[8]
    else:
        raise RTFError(f"unsupported dtype {t.dtype}; RTF1 stores float32 or float64")
    head = MAGIC + bytes([tag]) + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return head + np.ascontiguousarray(t, dtype=dt).tobytes()


def read_record(stream: io.BufferedIOBase) -> np.ndarray:
    def take(n: int) -> bytes:
        b = stream.read(n)
        if len(b) != n:
            raise RTFError(f"truncated RTF1 record: wanted {n} bytes, got {len(b)}")
        return b

    if take(4) != MAGIC:
        raise RTFError("bad RTF1 magic")
    tag = take(1)[0]
    if tag not in _TAGS:
        raise RTFError(f"unknown RTF1 dtype tag 0x{tag:02x}")
    (rank,) = struct.unpack("<I", take(4))
    shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
    dt = _TAGS[tag]
    n = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape)
    return data.astype(dt.newbyteorder("="), copy=True)


def decode(buf: bytes) -> np.ndarray:
    stream = io.BytesIO(buf)
    out = read_record(stream)
    if stream.read(1):
        raise RTFError("trailing bytes after RTF1 record")
    return out


def save(t: np.ndarray, path) -> None:
    Path(path).write_bytes(encode(t))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
