"""Named, reproducible random streams derived from a single integer seed."""
import zlib

import numpy as np


def stream_key(name):
    return zlib.crc32(name.encode("utf-8"))


def rng_for(seed, name, *keys):
    """Generator for sub-stream ``name`` (optionally keyed, e.g. by image id).

    Streams with different names or keys are statistically independent and do
    not depend on the order in which they are requested.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, stream_key(name)]
    entropy.extend(int(k) & 0xFFFFFFFFFFFFFFFF for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))
