"""Deterministic parallel map capped by ``DQCTRL_THREADS``."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count(default: int = 1) -> int:
    raw = os.environ.get("DQCTRL_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return default
    return max(1, n)


def parallel_map(fn, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]`` with results in input order."""
    items = list(items)
    n = worker_count() if workers is None else max(1, workers)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
