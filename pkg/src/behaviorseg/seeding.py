"""Derived seeds: every random stream descends from one root seed."""
import logging

import numpy as np

log = logging.getLogger(__name__)


def derive_seed(root: int, *keys: int) -> int:
    """Deterministic 32-bit seed for the stream identified by ``keys``."""
    seq = np.random.SeedSequence([int(root) & 0xFFFFFFFF, *(int(k) for k in keys)])
    seed = int(seq.generate_state(1)[0])
    log.debug("derived seed %d from root %d keys %s", seed, root, keys)
    return seed


def rng_for(root: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
