"""Counter-based seed derivation.

Every random draw in the package goes through :func:`derive_seed` so that the
value for item ``i`` never depends on how many items were processed before it,
or in which order workers finished.
"""
import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from an arbitrary tuple of str/int parts."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big") >> 1


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
