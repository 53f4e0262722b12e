"""Bounded thread pool over replica ranges.

Kernels release the GIL, so threads give real parallelism. Each chunk
writes into its own slice of preallocated outputs and every result depends
only on counter-addressed draws, so the outputs are identical for any
worker count. Reductions happen afterwards over the full arrays.
"""
import os
from concurrent.futures import ThreadPoolExecutor


def default_workers():
    try:
        return max(1, int(os.environ.get("CPFLOW_WORKERS", "1")))
    except ValueError:
        return 1


def chunks(n, workers, min_chunk=1):
    """Split range(n) into contiguous (start, stop) pieces, a few per worker."""
    if n <= 0:
        return []
    pieces = max(1, min(n // max(min_chunk, 1), 4 * workers)) if workers > 1 else 1
    step = -(-n // pieces)
    return [(a, min(a + step, n)) for a in range(0, n, step)]


def run_chunks(fn, n, workers=None, min_chunk=1):
    """Call fn(start, stop) over a partition of range(n); returns the list of results in order."""
    workers = default_workers() if workers is None else max(1, int(workers))
    parts = chunks(n, workers, min_chunk)
    if workers == 1 or len(parts) == 1:
        return [fn(a, b) for a, b in parts]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        futures = [ex.submit(fn, a, b) for a, b in parts]
        return [f.result() for f in futures]
