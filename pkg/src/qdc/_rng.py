"""Named random sub-streams derived from one root seed."""
import hashlib

import numpy as np


def _name_key(name):
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(seed, *names):
    """Generator for ``(seed, names...)``; independent of call order."""
    key = [int(seed) & 0xFFFFFFFF] + [_name_key(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(key))
