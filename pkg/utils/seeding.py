"""
Root-seed splitting.

Every random stream in a run is derived from one root seed and a tuple of
string/int keys, e.g. ``derive_seed(root, "trial", 3)``.  Keys are hashed with
CRC-32 so the mapping is stable across interpreter runs (unlike ``hash``), and
the result is mixed through ``numpy.random.SeedSequence``.
"""

import zlib
from typing import List, Union

import numpy as np

Key = Union[str, int]


def _key_words(keys) -> List[int]:
    words = []
    for key in keys:
        if isinstance(key, (int, np.integer)):
            words.append(int(key) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(key).encode("utf-8")))
    return words


def derive_seed(root_seed: int, *keys: Key) -> int:
    """Derive a 32-bit child seed from the root seed and a key path."""
    sequence = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF] + _key_words(keys))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def derive_rng(root_seed: int, *keys: Key) -> np.random.Generator:
    """Generator seeded from ``derive_seed``."""
    return np.random.default_rng(derive_seed(root_seed, *keys))


def trial_seeds(root_seed: int, n_trials: int) -> List[int]:
    """The seeds behind "n independent trials"."""
    return [derive_seed(root_seed, "trial", index) for index in range(n_trials)]
