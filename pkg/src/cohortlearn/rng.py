"""Named deterministic random streams.

Every stochastic concern (splitting, parameter init, batch order, negative
sampling, ...) pulls from its own generator derived from (seed, name). Streams
are independent, so consuming one never shifts another — adding or removing a
model component cannot change the draws seen elsewhere at the same seed.
"""

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator keyed by the master seed and a stream name."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
