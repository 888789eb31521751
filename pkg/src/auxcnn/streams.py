"""Named deterministic RNG streams.

Every source of randomness is keyed by (seed, purpose, *extras) through a
SeedSequence, never drawn from one shared generator. This keeps randomness
consumption independent of which networks exist, so ablation arms see
identical shuffles, augmentation draws and initializations; per-sample
augmentation streams are keyed by (seed, epoch, position) so results do not
depend on worker scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np

INIT = 1
SHUFFLE = 2
AUGMENT = 3
SAMPLER = 4
SPLIT = 5
SYNTH = 6
FRACTION = 7
CHECK = 8


def _as_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *key) -> np.random.Generator:
    """Generator for the (seed, *key) stream; stable across processes."""
    entropy = [_as_int(seed)] + [_as_int(k) for k in key]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *key) -> int:
    """A stable 63-bit integer seed for the (seed, *key) stream."""
    entropy = [_as_int(seed)] + [_as_int(k) for k in key]
    state = np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))
