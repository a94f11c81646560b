"""Bit strings with explicit length and a fixed byte serialization.

Bit order on the wire is LSB-first within each byte; the length in bits is
carried separately because it is generally not a multiple of 8.
"""

from __future__ import annotations

import numpy as np

__all__ = ["BitString"]


class BitString:
    """An ordered sequence of bits backed by a uint8 array of 0/1 values."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        arr = np.asarray(bits, dtype=np.uint8)
        if arr.ndim != 1:
            raise ValueError("bits must be one-dimensional")
        if arr.size and arr.max() > 1:
            raise ValueError("bits must be 0 or 1")
        self.bits = arr

    @classmethod
    def zeros(cls, n: int) -> "BitString":
        return cls(np.zeros(n, dtype=np.uint8))

    @classmethod
    def from_int(cls, value: int, n: int) -> "BitString":
        return cls(np.array([(value >> i) & 1 for i in range(n)], dtype=np.uint8))

    def to_int(self) -> int:
        out = 0
        for i, b in enumerate(self.bits):
            out |= int(b) << i
        return out

    def __len__(self) -> int:
        return int(self.bits.size)

    def __getitem__(self, idx):
        picked = self.bits[idx]
        if np.isscalar(picked) or picked.ndim == 0:
            return int(picked)
        return BitString(picked)

    def __xor__(self, other: "BitString") -> "BitString":
        if len(self) != len(other):
            raise ValueError("length mismatch in xor")
        return BitString(np.bitwise_xor(self.bits, other.bits))

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitString):
            return NotImplemented
        return len(self) == len(other) and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((len(self), self.to_bytes()))

    def popcount(self) -> int:
        return int(self.bits.sum())

    def to_bytes(self) -> bytes:
        # LSB-first within each byte; final partial byte zero-padded high.
        if not len(self):
            return b""
        return np.packbits(self.bits, bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, n_bits: int) -> "BitString":
        if n_bits > 8 * len(data):
            raise ValueError("byte buffer too short for declared bit length")
        arr = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
        return cls(arr[:n_bits])

    def to01(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)

    @classmethod
    def from01(cls, text: str) -> "BitString":
        return cls(np.array([1 if c == "1" else 0 for c in text], dtype=np.uint8))

    def __repr__(self) -> str:
        if len(self) <= 32:
            return f"BitString({self.to01()!r})"
        return f"BitString(len={len(self)})"
