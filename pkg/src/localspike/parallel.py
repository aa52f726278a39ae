"""Worker-pool parallelism for the hot per-timestep path.

On small CPU counts, competing thread pools (BLAS worker spin-waits vs.
anything else) destroy throughput, so the engine funnels all parallelism
through one pool of Python threads: the compiled kernels release the GIL,
and large GEMMs are split across output rows/columns (which keeps results
bitwise independent of the split).  While a :func:`engine_threads` scope is
active, BLAS-internal threading is limited to one thread and the splitting
kicks in; outside such a scope everything falls back to plain NumPy calls.

The pool size comes from ``LOCALSPIKE_THREADS`` (default: the CPU count).
"""

import contextlib
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - dependency is declared
    threadpool_limits = None

_split_active = False
_pool = None


def n_workers() -> int:
    env = os.environ.get("LOCALSPIKE_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _get_pool() -> ThreadPoolExecutor:
    global _pool
    if _pool is None:
        _pool = ThreadPoolExecutor(max_workers=n_workers(), thread_name_prefix="localspike")
    return _pool


@contextlib.contextmanager
def engine_threads():
    """Scope in which the engine manages its own threading.

    Limits BLAS pools to one thread and enables work splitting across the
    engine pool.  Nesting is harmless.
    """
    global _split_active
    if _split_active or n_workers() <= 1 or threadpool_limits is None:
        yield
        return
    _split_active = True
    try:
        with threadpool_limits(limits=1, user_api="blas"):
            yield
    finally:
        _split_active = False


def splitting() -> bool:
    return _split_active and n_workers() > 1


_MIN_SPLIT_FLOPS = 2e6


def matmul(a, b, out=None):
    """np.matmul with optional row/column splitting across the engine pool.

    Splitting partitions output rows (or columns, whichever side is
    larger), so each output element is still computed by a single serial
    dot product: results are bitwise identical to the unsplit call.
    """
    m, k = a.shape
    n = b.shape[1]
    if out is None:
        out = np.empty((m, n), dtype=a.dtype)
    if not splitting() or m * k * n < _MIN_SPLIT_FLOPS or max(m, n) < 2:
        return np.matmul(a, b, out=out)
    nw = min(n_workers(), max(m, n))
    pool = _get_pool()
    futures = []
    if m >= n:
        bounds = [m * i // nw for i in range(nw + 1)]
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            if hi > lo:
                futures.append(pool.submit(np.matmul, a[lo:hi], b, out=out[lo:hi]))
    else:
        bounds = [n * i // nw for i in range(nw + 1)]
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            if hi > lo:
                futures.append(pool.submit(np.matmul, a, b[:, lo:hi], out=out[:, lo:hi]))
    for f in futures:
        f.result()
    return out


def batched(fn, n_items, min_items=2):
    """Run ``fn(lo, hi)`` over a partition of range(n_items) on the pool.

    ``fn`` must only write to disjoint slices.  Runs inline when splitting
    is off or the batch is too small.
    """
    if not splitting() or n_items < min_items:
        fn(0, n_items)
        return
    nw = min(n_workers(), n_items)
    pool = _get_pool()
    bounds = [n_items * i // nw for i in range(nw + 1)]
    futures = [
        pool.submit(fn, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo
    ]
    for f in futures:
        f.result()
