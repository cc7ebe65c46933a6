"""Point clouds and their on-disk formats.

A point carries an m-channel signal vector: absolute position in meters
followed by color and, optionally, normal components pre-mapped to [-1, 1]
(m = 6 or 9).

Text format: one point per line, ``x y z r g b [nx ny nz]`` whitespace
separated, ``#`` starts a comment line.  Binary format: ASCII header
``SVPC1``, uint32 point count, uint32 m, then count*m little-endian float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

BINARY_MAGIC = b"SVPC1"
VALID_CHANNEL_COUNTS = (6, 9)


class PointCloudFormatError(ValueError):
    """Malformed point-cloud input; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class PointCloud:
    """Raw points; ``signals[:, :3]`` is the absolute position in meters."""

    signals: np.ndarray  # (P, m) float64

    def __post_init__(self):
        sig = np.asarray(self.signals, dtype=np.float64)
        if sig.ndim != 2 or sig.shape[1] not in VALID_CHANNEL_COUNTS:
            raise ValueError(f"signals must be (P, m) with m in {VALID_CHANNEL_COUNTS}, got {sig.shape}")
        if not np.isfinite(sig).all():
            raise ValueError("point signals must be finite")
        nonpos = sig[:, 3:]
        if nonpos.size and (np.abs(nonpos) > 1.0 + 1e-9).any():
            raise ValueError("color/normal components must lie in [-1, 1]")
        object.__setattr__(self, "signals", sig)

    @property
    def positions(self) -> np.ndarray:
        return self.signals[:, :3]

    @property
    def num_points(self) -> int:
        return self.signals.shape[0]

    @property
    def num_channels(self) -> int:
        return self.signals.shape[1]


def load_text(path) -> PointCloud:
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) not in VALID_CHANNEL_COUNTS:
                raise PointCloudFormatError(
                    f"expected 6 or 9 fields, found {len(fields)}", line=lineno
                )
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise PointCloudFormatError(
                    f"inconsistent field count {len(fields)} (file uses {width})", line=lineno
                )
            try:
                rows.append([float(f) for f in fields])
            except ValueError:
                raise PointCloudFormatError(f"non-numeric field in {fields}", line=lineno) from None
    if not rows:
        raise PointCloudFormatError("no points in file")
    try:
        return PointCloud(np.array(rows, dtype=np.float64))
    except ValueError as exc:
        raise PointCloudFormatError(str(exc)) from None


def save_text(pc: PointCloud, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in pc.signals:
            fh.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def load_binary(path) -> PointCloud:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != BINARY_MAGIC:
            raise PointCloudFormatError(f"bad magic {magic!r}, expected {BINARY_MAGIC!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise PointCloudFormatError("truncated header")
        count, m = struct.unpack("<II", header)
        if m not in VALID_CHANNEL_COUNTS:
            raise PointCloudFormatError(f"unsupported channel count {m}")
        payload = fh.read(4 * count * m)
        if len(payload) != 4 * count * m:
            raise PointCloudFormatError("truncated payload")
        data = np.frombuffer(payload, dtype="<f4").reshape(count, m)
    try:
        return PointCloud(data.astype(np.float64))
    except ValueError as exc:
        raise PointCloudFormatError(str(exc)) from None


def save_binary(pc: PointCloud, path) -> None:
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<II", pc.num_points, pc.num_channels))
        fh.write(pc.signals.astype("<f4").tobytes())


def load(path) -> PointCloud:
    """Dispatch on the binary magic, falling back to the text reader."""
    with open(path, "rb") as fh:
        head = fh.read(5)
    if head == BINARY_MAGIC:
        return load_binary(path)
    return load_text(path)
