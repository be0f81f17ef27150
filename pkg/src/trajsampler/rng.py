"""Counter-based random streams.

Every stochastic component draws from a Philox generator keyed by
(master_seed, stream_id, counter). Streams are independent of execution
order, so serial and worker-pool runs, and interrupted runs resumed from
a snapshot, produce bit-identical draws.
"""

from __future__ import annotations

import numpy as np

# Disjoint stream-id namespaces for the different consumers. Chain ids
# and sample indices live in the low 32 bits of the second key word.
PURPOSE_CHAIN = 0
PURPOSE_INIT = 1
PURPOSE_TRAIN = 2
PURPOSE_SAMPLE = 3
PURPOSE_SEARCH = 4


def substream(master_seed: int, purpose: int, stream_id: int, counter: int = 0) -> np.random.Generator:
    """Return a Generator for one (purpose, stream, counter) cell.

    The cell is encoded in the Philox key, not the counter word, so
    neighbouring cells can draw arbitrarily many values without
    overlapping.
    """
    if not 0 <= stream_id < 2**32:
        raise ValueError(f"stream_id out of range: {stream_id}")
    if not 0 <= counter < 2**24:
        raise ValueError(f"counter out of range: {counter}")
    key = np.array(
        [
            np.uint64(master_seed & 0xFFFFFFFFFFFFFFFF),
            (np.uint64(purpose) << np.uint64(56))
            | (np.uint64(counter) << np.uint64(32))
            | np.uint64(stream_id),
        ],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def chain_stream(master_seed: int, chain_id: int, iteration: int) -> np.random.Generator:
    """Stream for one MCMC chain iteration."""
    return substream(master_seed, PURPOSE_CHAIN, chain_id, iteration)
