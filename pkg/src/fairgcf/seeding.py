"""Named random substreams derived from one master seed.

Every source of randomness in an experiment (splitting, embedding init,
negative sampling, sweep arms) pulls from its own stream so that changing
one stage never perturbs the draws of another.
"""

from __future__ import annotations

import numpy as np

STREAM_CODES = {
    "split": 11,
    "init": 23,
    "sampling": 37,
    "train": 41,
    "sweep": 53,
}


def derive_seed(master_seed: int, stream: str, *indices: int) -> int:
    """Deterministic integer seed for a named substream of ``master_seed``."""
    if stream not in STREAM_CODES:
        raise KeyError(f"unknown stream {stream!r}; expected one of {sorted(STREAM_CODES)}")
    entropy = [int(master_seed), STREAM_CODES[stream], *map(int, indices)]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def stream_rng(master_seed: int, stream: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, stream, *indices))
