"""NSAT checkpoint files.

Layout (little-endian)::

    b"NSAT" | u32 version=1 | u32 entry count
    per entry: u32 name length | UTF-8 name | u8 rank | rank x u32 dims | float64 data (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..exceptions import ParseError

MAGIC = b"NSAT"
VERSION = 1


def dumps(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ParseError("bad checkpoint magic, expected b'NSAT'", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    (count,) = r.unpack("<I", "entry count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I", "name length")
        start = r.pos
        try:
            name = r.take(nlen, "entry name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"entry name is not valid UTF-8: {exc}", start) from None
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * n, f"data of {name!r}"), dtype="<f8")
        out[name] = data.reshape(dims).astype(np.float64)
    if r.pos != len(buf):
        raise ParseError("trailing bytes after last checkpoint entry", r.pos)
    return out


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
