"""Binary/text point-cloud files and the shared parse-error type.

PCF1 layout (little-endian)::

    b"PCF1"  u32 M  then M*3 float32, point-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

PCF_MAGIC = b"PCF1"


class FormatError(ValueError):
    """Malformed file. Carries the failing section and byte offset."""

    def __init__(self, section: str, offset: int, message: str, path=None):
        self.section = section
        self.offset = offset
        self.path = path
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{section} at byte {offset}: {message}")


class Reader:
    """Cursor over a byte buffer that reports offsets on failure."""

    def __init__(self, data: bytes, path=None):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, section: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(section, self.pos,
                              f"truncated: need {n} bytes, have {len(self.data) - self.pos}",
                              self.path)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, section: str) -> int:
        return struct.unpack("<I", self.take(4, section))[0]

    def expect(self, magic: bytes, section: str = "header") -> None:
        start = self.pos
        got = self.take(len(magic), section)
        if got != magic:
            raise FormatError(section, start, f"bad magic {got!r}, expected {magic!r}", self.path)

    def finish(self, section: str = "trailer") -> None:
        if self.pos != len(self.data):
            raise FormatError(section, self.pos,
                              f"{len(self.data) - self.pos} unexpected trailing bytes", self.path)


def encode_pcf(points) -> bytes:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    return PCF_MAGIC + struct.pack("<I", pts.shape[0]) + pts.tobytes()


def decode_pcf(data: bytes, path=None) -> np.ndarray:
    r = Reader(data, path)
    r.expect(PCF_MAGIC)
    m = r.u32("header")
    body = r.take(12 * m, "points")
    r.finish()
    return np.frombuffer(body, dtype="<f4").reshape(m, 3).astype(np.float64)


def save_pcf(path, points) -> None:
    Path(path).write_bytes(encode_pcf(points))


def load_pcf(path) -> np.ndarray:
    return decode_pcf(Path(path).read_bytes(), path=str(path))


def save_xyz(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        for x, y, z in pts:
            fh.write(f"{x!r} {y!r} {z!r}\n")


def load_xyz(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError("points", lineno, f"expected 3 values, got {len(parts)}", str(path))
            rows.append([float(v) for v in parts])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def load_cloud(path) -> np.ndarray:
    """Load either PCF1 or the plain-text ``x y z`` variant, by content."""
    data = Path(path).read_bytes()
    if data[:4] == PCF_MAGIC:
        return decode_pcf(data, path=str(path))
    return load_xyz(path)


def encode_labels(labels) -> bytes:
    return np.asarray(labels, dtype="<u2").tobytes()


def decode_labels(data: bytes, count: int, path=None) -> np.ndarray:
    if len(data) != 2 * count:
        raise FormatError("labels", min(len(data), 2 * count),
                          f"expected {2 * count} bytes for {count} labels, got {len(data)}", path)
    return np.frombuffer(data, dtype="<u2").astype(np.int64)
