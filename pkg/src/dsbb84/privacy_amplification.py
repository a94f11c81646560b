"""Key compression by seeded Toeplitz hashing.

The hash family is universal: two distinct inputs collide on the
(l - m)-bit output with probability 2^-(l-m) over the seed, which is what
lets a fixed number of adversary-known bits be squeezed out of the
reconciled key.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bits import BitString
from .rng import StageStream

__all__ = ["ToeplitzSpec", "toeplitz_hash", "draw_seed"]


@dataclass(frozen=True)
class ToeplitzSpec:
    """Seeded (l - m) x l Toeplitz matrix over GF(2).

    Row i, column j holds seed bit i - j + l - 1, so the seed lists the
    matrix diagonals from the top-right corner down to the bottom-left.
    """

    l: int
    m: int
    seed: BitString

    def __post_init__(self):
        if not 0 <= self.m <= self.l:
            raise ValueError("need 0 <= m <= l")
        want = self.l + (self.l - self.m) - 1
        if self.m == self.l:
            want = 0
        if len(self.seed) != max(want, 0):
            raise ValueError(f"seed must have {max(want, 0)} bits")

    @property
    def out_bits(self) -> int:
        return self.l - self.m


def toeplitz_hash(spec: ToeplitzSpec, key) -> BitString:
    """Compress an l-bit key to l - m bits.

    Output bit i is the GF(2) inner product of Toeplitz row i with the
    key; computed as a block convolution (carryless product) so the cost
    is one word-parallel shift-xor pass per set key bit.
    """
    bits = key.bits if isinstance(key, BitString) else np.asarray(key, np.uint8)
    if bits.size != spec.l:
        raise ValueError(f"key must have {spec.l} bits")
    if spec.out_bits == 0:
        return BitString.zeros(0)
    seed_int = spec.seed.to_int()
    prod = 0
    for j in np.nonzero(bits)[0]:
        prod ^= seed_int << int(j)
    lo = spec.l - 1
    out = np.array([(prod >> (lo + i)) & 1 for i in range(spec.out_bits)],
                   dtype=np.uint8)
    return BitString(out)


def draw_seed(l: int, m: int, stream: StageStream) -> ToeplitzSpec:
    """Fresh uniformly random hashing spec from the given stream."""
    n_seed = l + (l - m) - 1 if m < l else 0
    return ToeplitzSpec(l, m, BitString(stream.bits(n_seed)))
