"""Named-stream seed derivation.

Every random draw in a run flows from one master seed through a named
stream, so adding or removing one consumer (an algorithm, a taxon task)
never perturbs the draws of another.
"""

import hashlib

import numpy as np


def derive_seed(master: int, *names) -> int:
    """Stable 63-bit seed for the stream identified by ``names``."""
    key = "/".join([str(int(master))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def derive_rng(master: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *names))


def rows_digest(rows) -> str:
    """Canonical digest of a training-row index set.

    Inner-CV streams are keyed on the training set itself rather than on
    the algorithm label, so algorithms sharing a training set also share
    their inner splits (and the single-habitat Same/All scenarios stay
    exactly equivalent).
    """
    arr = np.asarray(sorted(int(r) for r in rows), dtype=np.int64)
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]
