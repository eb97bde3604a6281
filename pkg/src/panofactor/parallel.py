"""Order-preserving map over independent work items."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def available_threads() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


def pmap(fn, items, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally spread over worker processes.

    Results come back in input order and every item is computed the same way
    in either mode, so serial and parallel runs agree bit for bit.  ``fn``
    must be picklable (a module-level function or a partial of one).
    """
    items = list(items)
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
