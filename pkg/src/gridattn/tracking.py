"""Peak transient-allocation accounting for the attention compute paths.

A tracker counts elements of the large transient buffers (downsampled
tensors, affinity matrices, gathered dictionaries) that a computation holds
simultaneously. Trackers are installed per computation via a context
variable, so concurrent measurements never share state; the compute code
also passes the resolved tracker into worker threads explicitly.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from contextvars import ContextVar

import numpy as np


class PeakTracker:
    """Thread-safe running count of live tracked elements and their peak."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def add(self, nelems: int) -> None:
        with self._lock:
            self.current += int(nelems)
            if self.current > self.peak:
                self.peak = self.current

    def remove(self, nelems: int) -> None:
        with self._lock:
            self.current -= int(nelems)


_active: ContextVar[PeakTracker | None] = ContextVar("gridattn_tracker", default=None)


def active_tracker() -> PeakTracker | None:
    return _active.get()


@contextmanager
def tracker_installed(tracker: PeakTracker):
    token = _active.set(tracker)
    try:
        yield tracker
    finally:
        _active.reset(token)


def note_alloc(tracker: PeakTracker | None, *arrays: np.ndarray) -> None:
    if tracker is not None:
        tracker.add(sum(a.size for a in arrays))


def note_free(tracker: PeakTracker | None, *arrays: np.ndarray) -> None:
    if tracker is not None:
        tracker.remove(sum(a.size for a in arrays))
