"""Deterministic thread pool helpers.

Work is split into a fixed chunking that does not depend on the thread
count; threads only consume the chunk queue and results are combined in
chunk order, so any thread count produces bitwise-identical results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

_N_THREADS = 1
_POOL = None
_CHUNK = 512


def set_threads(n):
    global _N_THREADS, _POOL
    n = max(1, int(n))
    if n == _N_THREADS:
        return
    if _POOL is not None:
        _POOL.shutdown(wait=True)
        _POOL = None
    _N_THREADS = n
    if n > 1:
        _POOL = ThreadPoolExecutor(max_workers=n)


def get_threads():
    return _N_THREADS


def fixed_chunks(n_items, chunk=_CHUNK):
    """Slices covering range(n_items); independent of the thread count."""
    return [slice(i, min(i + chunk, n_items)) for i in range(0, n_items, chunk)]


def map_ordered(fn, chunks):
    """Apply fn to each chunk, in parallel if enabled; results in order."""
    if _POOL is None or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    return list(_POOL.map(fn, chunks))
