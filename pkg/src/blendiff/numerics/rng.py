"""Seedable, counter-based random streams.

Backed by numpy's Philox bit generator, whose output depends only on the
(key, counter) pair and therefore is identical on every platform.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _derive_key(seed, label):
    digest = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """A reproducible random stream.

    ``Rng(seed)`` always yields the same sequence.  :meth:`child` derives an
    independent stream from a label, which keeps consumers (sampling noise,
    editing noise, augmentations) from perturbing one another.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def __repr__(self):
        return f"Rng(seed={self.seed})"

    def child(self, label):
        return Rng(_derive_key(self.seed, label))

    def normal(self, shape=None):
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, shape)

    def random(self, shape=None):
        return self._gen.random(shape)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self._gen.permutation(n)

    def bits(self, n):
        """``n`` raw 64-bit draws, for reproducibility checks."""
        return self._gen.integers(0, _MASK64, n, dtype=np.uint64, endpoint=True)


def as_rng(rng):
    if rng is None:
        return Rng(0)
    if isinstance(rng, Rng):
        return rng
    return Rng(int(rng))
