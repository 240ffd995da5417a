"""Bounded worker pool for embarrassingly parallel loops.

Results keep input order, so output never depends on thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count(requested: int | None = None) -> int:
    """Resolve a worker count: explicit value, else UMSEG_THREADS, else 1."""
    if requested is not None and requested >= 1:
        return requested
    env = os.environ.get("UMSEG_THREADS", "")
    if env.isdigit() and int(env) >= 1:
        return int(env)
    return 1


def parallel_map(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
