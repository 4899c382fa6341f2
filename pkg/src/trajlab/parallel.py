"""Index-ordered fan-out helpers.

Work is cut into fixed-size chunks independent of the worker count, so
results never depend on how many processes ran them.
"""
from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor

CHUNK = 256


def default_workers():
    env = os.environ.get("TRAJLAB_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def chunk_bounds(n, chunk=CHUNK):
    return [(s, min(n, s + chunk)) for s in range(0, n, chunk)]


def map_chunks(fn, n, args=(), workers=1, chunk=CHUNK):
    """Call ``fn(start, stop, *args)`` per chunk and concatenate the lists."""
    bounds = chunk_bounds(n, chunk)
    if workers is None:
        workers = default_workers()
    if workers <= 1 or len(bounds) <= 1:
        parts = [fn(s, e, *args) for s, e in bounds]
    else:
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
            futs = [ex.submit(fn, s, e, *args) for s, e in bounds]
            parts = [f.result() for f in futs]
    out = []
    for p in parts:
        out.extend(p)
    return out
