"""Keyed deterministic random streams.

Every stochastic step in the pipeline draws from its own counter-based
generator keyed by (seed, purpose tags). No global RNG state exists, so
results are independent of call order and safe to parallelize.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *tags) -> np.random.Generator:
    """Return an independent Philox generator keyed by (seed, *tags).

    Tags may be ints or strings; strings are hashed with SHA-256 so the
    keying is stable across platforms and processes.
    """
    entropy = [int(seed) & _MASK64] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
