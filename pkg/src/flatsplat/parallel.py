"""Thread-pool helpers with thread-count-independent results.

Work is always split into the same fixed row bands regardless of how many
worker threads execute them, and callers combine per-band results in band
order.  Consequently every computation in the package is bit-identical for
any value of FLATSPLAT_THREADS.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

BAND_ROWS = 16
_ENV_VAR = "FLATSPLAT_THREADS"

T = TypeVar("T")


def thread_count() -> int:
    """Worker threads to use, from the FLATSPLAT_THREADS env var (default 1)."""
    raw = os.environ.get(_ENV_VAR, "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def row_bands(height: int, band_rows: int = BAND_ROWS) -> list[tuple[int, int]]:
    """Fixed [start, stop) row bands; the split never depends on thread count."""
    return [(r, min(r + band_rows, height)) for r in range(0, height, band_rows)]


def map_ordered(fn: Callable[[T], object], items: Sequence[T]) -> list:
    """Apply ``fn`` to every item, preserving order; threads only add speed."""
    n = thread_count()
    if n <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
