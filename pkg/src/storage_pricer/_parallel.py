"""Deterministic parallel map used by sweeps and scenario simulation."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def default_threads():
    env = os.environ.get("STORAGE_PRICER_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def parallel_map(fn, items, threads=None):
    """Map preserving input order; threads=1 degenerates to a plain loop."""
    threads = default_threads() if threads is None else max(1, int(threads))
    items = list(items)
    if threads == 1 or len(items) <= 1:
        return [fn(v) for v in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
