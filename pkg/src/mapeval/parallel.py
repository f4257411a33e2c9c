"""Deterministic fan-out of independent jobs over worker processes.

Jobs share read-only state (e.g. a surfel map) via fork inheritance, so the
state is never pickled.  Results come back in submission order, and
threads=1 runs everything in-process, so a parallel run reproduces the
serial result exactly.
"""

from __future__ import annotations

import multiprocessing as mp

_STATE = None
_WORKER = None


def _invoke(item):
    return _WORKER(_STATE, item)


def run_jobs(worker, state, items, threads: int = 1):
    """Apply worker(state, item) to every item; results in input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [worker(state, item) for item in items]
    global _STATE, _WORKER
    ctx = mp.get_context("fork")
    _STATE = state
    _WORKER = worker
    try:
        with ctx.Pool(processes=min(threads, len(items))) as pool:
            return pool.map(_invoke, items)
    finally:
        _STATE = None
        _WORKER = None
