"""Deterministic randomness service.

One counter-based generator (Philox) per run, domain-separated by stage
label, so stages can be reordered or parallelized without perturbing each
other's streams and every run is reproducible from (seed, label).

Consumption is tracked per stage in bits.  For bulk numpy draws the count
is a documented estimate (logical bits of the sampled values); for the
bit-level draws used by permutations it is exact.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

__all__ = ["RandomService", "StageStream"]


def _philox_key(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class StageStream:
    """Seeded stream for one pipeline stage, with bit accounting."""

    def __init__(self, seed: int, label: str):
        self.label = label
        self.gen = np.random.Generator(np.random.Philox(key=_philox_key(seed, label)))
        self.bits_consumed = 0
        self._word = 0
        self._word_bits = 0

    # ---- bulk draws (numpy-backed, estimated accounting) ----

    def _charge(self, bits: float) -> None:
        self.bits_consumed += int(math.ceil(bits))

    def random(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        self._charge(53 * n)
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        lo, hi = (0, low) if high is None else (low, high)
        n = 1 if size is None else int(np.prod(size))
        span = max(int(hi) - int(lo), 1)
        self._charge(max(span - 1, 1).bit_length() * n)
        return self.gen.integers(lo, hi, size=size)

    def bits(self, n: int) -> np.ndarray:
        """n bits as a uint8 array of 0/1."""
        self._charge(n)
        return self.gen.integers(0, 2, size=n).astype(np.uint8)

    def binomial(self, n, p, size=None):
        cnt = 1 if size is None else int(np.prod(size))
        self._charge(32 * cnt)
        return self.gen.binomial(n, p, size=size)

    def multinomial(self, n, pvals):
        self._charge(32 * len(pvals))
        return self.gen.multinomial(n, pvals)

    def hypergeometric(self, ngood, nbad, nsample, size=None):
        cnt = 1 if size is None else int(np.prod(size))
        self._charge(32 * cnt)
        return self.gen.hypergeometric(ngood, nbad, nsample, size=size)

    def choice_without_replacement(self, n: int, size: int) -> np.ndarray:
        self._charge(max(n - 1, 1).bit_length() * size)
        return self.gen.choice(n, size=size, replace=False)

    # ---- exact bit-level draws (rejection sampling) ----

    def _take_bits(self, k: int) -> int:
        """k raw bits from the stream as an integer; exact accounting."""
        while self._word_bits < k:
            self._word |= int(self.gen.integers(0, 1 << 62)) << self._word_bits
            self._word_bits += 62
        out = self._word & ((1 << k) - 1)
        self._word >>= k
        self._word_bits -= k
        self.bits_consumed += k
        return out

    def index_below(self, n: int) -> int:
        """Uniform integer in [0, n) consuming ceil(log2 n) bits per attempt."""
        if n <= 1:
            return 0
        k = (n - 1).bit_length()
        while True:
            v = self._take_bits(k)
            if v < n:
                return v


class RandomService:
    """Factory of per-stage streams for one run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, StageStream] = {}

    def stream(self, label: str) -> StageStream:
        if label not in self._streams:
            self._streams[label] = StageStream(self.seed, label)
        return self._streams[label]

    def accounting(self) -> dict[str, int]:
        return {label: s.bits_consumed for label, s in sorted(self._streams.items())}
