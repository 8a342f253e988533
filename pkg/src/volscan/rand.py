"""Named sub-seeds: every random stream derives from one integer seed."""

import zlib

import numpy as np


def sub_seed(seed, name, *extra):
    """Stable 64-bit seed for the stream ``name`` (e.g. "init", "shuffle")."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *map(int, extra)])
    return int(ss.generate_state(1, np.uint64)[0])


def rng_for(seed, name, *extra):
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *map(int, extra)]))
