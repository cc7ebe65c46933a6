"""Checkpoint file format.

Layout (all little-endian): the 5-byte magic ``SW3D1`` followed by one blob
per named array until end of file.  Each blob is: uint32 name length, UTF-8
name, uint32 shape rank, rank * uint64 dimensions, then the float64 payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SW3D1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, blobs: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in blobs.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blobs: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated blob header")
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = fh.read(8 * count)
            if len(payload) != 8 * count:
                raise CheckpointError(f"truncated payload for {name!r}")
            blobs[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return blobs


def restore_into(blobs: dict[str, np.ndarray], named_params: dict, buffers: dict[str, np.ndarray]) -> None:
    """Copy checkpoint blobs into live parameters/buffers, validating shapes."""
    for name, param in named_params.items():
        if name not in blobs:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if blobs[name].shape != param.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {blobs[name].shape}, model {param.data.shape}"
            )
        param.data[...] = blobs[name]
    for name, buf in buffers.items():
        if name in blobs:
            buf[...] = blobs[name]
