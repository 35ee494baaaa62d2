"""Seedable, platform-independent random streams.

Every random draw in the project comes from a Philox (64-bit counter-based)
bit generator keyed by a blake2b-128 digest of a labelled key tuple, e.g.
``stream(seed, "scene", index)``.  Distinct labels give statistically
independent streams, and a draw depends only on its key, never on how many
draws happened elsewhere.  Scene synthesis restricts itself to uniform
doubles (a direct bit transform of the Philox stream) so generated datasets
are byte-identical across platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SALT = b"eradiff.v1"


def stream(*key: int | str) -> np.random.Generator:
    """Return a fresh Philox generator keyed by the labelled tuple."""
    for part in key:
        if not isinstance(part, (int, str)):
            raise TypeError(f"stream key parts must be int or str, got {type(part)!r}")
    digest = hashlib.blake2b(
        _SALT + "|".join(repr(p) for p in key).encode(), digest_size=16
    ).digest()
    words = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=words))


def uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    """Uniform double in [lo, hi)."""
    return lo + (hi - lo) * rng.random()


def uniform_int(rng: np.random.Generator, lo: int, hi: int) -> int:
    """Uniform integer in [lo, hi], built from a uniform double."""
    if hi < lo:
        raise ValueError(f"empty integer range [{lo}, {hi}]")
    return min(lo + int(rng.random() * (hi - lo + 1)), hi)


def choice(rng: np.random.Generator, items: list):
    return items[uniform_int(rng, 0, len(items) - 1)]


def derive_seed(*key: int | str) -> int:
    """A 63-bit integer seed derived from the labelled tuple."""
    digest = hashlib.blake2b(
        _SALT + b"#seed|" + "|".join(repr(p) for p in key).encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") >> 1
