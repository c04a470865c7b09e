"""Counter-based random streams for reproducible parallel ensembles.

Paths are grouped in fixed-size blocks.  Block ``b`` of stream ``s`` draws from
a Philox generator keyed by ``SeedSequence(master_seed, spawn_key=(s, b))``;
path ``p`` is lane ``p % BLOCK`` of block ``p // BLOCK``.  Every block always
draws a full ``BLOCK`` lanes, so a path's noise does not depend on how many
paths were requested or on the order in which blocks run.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK = 1024


def block_generator(master_seed: int, block: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def block_layout(n_paths: int):
    """Yield ``(block, lanes_used)`` covering ``n_paths`` paths."""
    n_blocks = -(-n_paths // BLOCK)
    return [(b, min(BLOCK, n_paths - b * BLOCK)) for b in range(n_blocks)]


def path_key(p: int):
    return divmod(int(p), BLOCK)


def thread_count(threads=None) -> int:
    if threads is not None:
        return max(1, int(threads))
    return max(1, int(os.environ.get("QVLAB_THREADS", "1")))


def map_blocks(fn, blocks, threads=None):
    """Apply ``fn`` to each block; results come back in block order."""
    n = thread_count(threads)
    if n == 1 or len(blocks) == 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, blocks))
