"""Instrumented allocator for attention workspaces.

Engines request named buffers through a :class:`WorkspaceTracker` so that the
benchmark harness can account for live workspace bytes exactly.  Live bytes
are tracked per tag ("coeff" for coefficient matrices, "proj" for Q/K/V
projections, "stream" for the streaming engine's per-row softmax stats);
process RSS is never consulted.
"""

from __future__ import annotations

import threading

import numpy as np

# Tags used by the attention engines.
TAG_COEFF = "coeff"
TAG_PROJ = "proj"
TAG_STREAM = "stream"


class WorkspaceTracker:
    """Counts live/peak bytes and scalars of tagged workspace buffers.

    ``alloc`` hands out a zeroed ndarray and records it; ``release`` retires
    it.  Buffers released out of order are fine; double release is an error.
    Counter updates are locked so window-parallel forward passes stay exact.
    """

    def __init__(self):
        self.live_bytes = 0
        self.peak_bytes = 0
        self.alloc_count = 0
        self.total_bytes = 0
        self._live_by_tag: dict[str, int] = {}
        self._peak_by_tag: dict[str, int] = {}
        self._total_scalars_by_tag: dict[str, int] = {}
        self._live_tags: dict[int, str] = {}
        self._lock = threading.Lock()

    def alloc(self, tag: str, shape, dtype=np.float64) -> np.ndarray:
        buf = np.zeros(shape, dtype=dtype)
        with self._lock:
            self.alloc_count += 1
            self.total_bytes += buf.nbytes
            self.live_bytes += buf.nbytes
            self.peak_bytes = max(self.peak_bytes, self.live_bytes)
            self._live_by_tag[tag] = self._live_by_tag.get(tag, 0) + buf.nbytes
            self._peak_by_tag[tag] = max(self._peak_by_tag.get(tag, 0), self._live_by_tag[tag])
            self._total_scalars_by_tag[tag] = self._total_scalars_by_tag.get(tag, 0) + buf.size
            self._live_tags[id(buf)] = tag
        return buf

    def release(self, buf: np.ndarray) -> None:
        with self._lock:
            key = id(buf)
            if key not in self._live_tags:
                raise ValueError("buffer was not allocated by this tracker or already released")
            tag = self._live_tags.pop(key)
            self.live_bytes -= buf.nbytes
            self._live_by_tag[tag] -= buf.nbytes

    def live_bytes_for(self, tag: str) -> int:
        return self._live_by_tag.get(tag, 0)

    def peak_bytes_for(self, tag: str) -> int:
        return self._peak_by_tag.get(tag, 0)

    def total_scalars_for(self, tag: str) -> int:
        """Total scalars ever allocated under ``tag`` (not just live)."""
        return self._total_scalars_by_tag.get(tag, 0)


class NullTracker:
    """No-op stand-in used when nobody is measuring."""

    def alloc(self, tag, shape, dtype=np.float64):
        return np.zeros(shape, dtype=dtype)

    def release(self, buf):
        pass


NULL_TRACKER = NullTracker()
