"""Small fork-based worker pool.

Large read-only inputs (image stacks, fitted models) are placed in a
module-level context BEFORE the pool forks, so children see them via
copy-on-write without pickling.  Task arguments stay small (indices,
seeds).  Results come back in submission order, so output is
independent of the worker count.
"""

from __future__ import annotations

import multiprocessing

_context = None


def get_context():
    return _context


def set_context(ctx) -> None:
    global _context
    _context = ctx


def _limit_blas():
    # keep per-process BLAS single-threaded so a run's arithmetic does
    # not depend on how work is split across processes
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except Exception:
        pass


def map_tasks(func, items, threads: int, ctx=None):
    """func(item) for each item, optionally across forked workers.

    ctx, if given, is installed with set_context before forking and
    readable in workers (and in the sequential path) via get_context.
    """
    items = list(items)
    if ctx is not None:
        set_context(ctx)
    if threads <= 1 or len(items) <= 1:
        _limit_blas()
        return [func(it) for it in items]
    mp = multiprocessing.get_context("fork")
    chunk = max(1, len(items) // (threads * 4))
    with mp.Pool(processes=threads, initializer=_limit_blas) as pool:
        return pool.map(func, items, chunksize=chunk)
