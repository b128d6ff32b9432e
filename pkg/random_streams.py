"""
Reproducible random streams for the MABE Laboratory
Counter-based Philox generators addressed by (seed, worker_id, purpose)
"""

from typing import Union

import numpy as np

from core_math import TokenDistribution


# Named purposes keep independent streams for independent concerns, so that
# e.g. adding a probe set never shifts the training data order.
PURPOSES = {
    "data": 0,
    "init": 1,
    "probe": 2,
    "eval": 3,
    "decode": 4,
    "check": 5,
}


def stream(seed: int, worker_id: int = 0, purpose: str = "data") -> np.random.Generator:
    """
    Return the Philox stream for (seed, worker_id, purpose)

    Philox is counter-based: the key is derived from the three coordinates and
    the stream is identical across platforms and numpy versions that ship it.
    """
    if seed < 0 or worker_id < 0:
        raise ValueError(f"seed and worker_id must be non-negative, got {seed}, {worker_id}")
    if purpose not in PURPOSES:
        raise ValueError(f"Unknown stream purpose: {purpose}")
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(PURPOSES[purpose], worker_id))
    return np.random.Generator(np.random.Philox(sequence))


def categorical(rng: np.random.Generator, probs: Union[TokenDistribution, np.ndarray]) -> int:
    """Draw one index by inverting the cumulative distribution"""
    weights = probs.probs if isinstance(probs, TokenDistribution) else np.asarray(probs, dtype=np.float64)
    cumulative = np.cumsum(weights)
    u = rng.random() * cumulative[-1]
    index = int(np.searchsorted(cumulative, u, side="right"))
    # zero-mass tokens at the tail can never be selected
    return min(index, int(np.flatnonzero(weights > 0)[-1]))
