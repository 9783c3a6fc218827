"""Packed {-1, +1} vectors and the XNOR/popcount dot product.

Layout: logical +1 is stored as bit 1, -1 as bit 0. Bit ``i`` lives in word
``i // 64`` at position ``i % 64`` (LSB first). Bits past ``length`` in the
last word are always zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels

WORD_BITS = 64


def n_words(nbits: int) -> int:
    return (nbits + WORD_BITS - 1) // WORD_BITS


def tail_mask(nbits: int) -> int:
    r = nbits % WORD_BITS
    return (1 << WORD_BITS) - 1 if r == 0 else (1 << r) - 1


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array along its last axis into uint64 words.

    Leading axes are kept, so ``(rows, nbits)`` becomes ``(rows, n_words)``.
    """
    bits = np.asarray(bits, dtype=bool)
    nbits = bits.shape[-1]
    nw = n_words(nbits)
    pad = nw * WORD_BITS - nbits
    if pad:
        widths = [(0, 0)] * (bits.ndim - 1) + [(0, pad)]
        bits = np.pad(bits, widths)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


def unpack_bits(words: np.ndarray, nbits: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`; returns booleans of trailing size ``nbits``."""
    words = np.ascontiguousarray(words, dtype="<u8")
    raw = words.view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little", count=nbits)
    return bits.astype(bool)


@dataclass(frozen=True, eq=False)
class BitVector:
    words: np.ndarray
    length: int

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if words.ndim != 1 or words.shape[0] != n_words(self.length):
            raise ValueError(f"{words.shape} words cannot hold {self.length} bits")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitVector):
            return NotImplemented
        return self.length == other.length and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.length, self.words.tobytes()))

    def is_canonical(self) -> bool:
        if self.length == 0:
            return True
        return int(self.words[-1]) & ~tail_mask(self.length) == 0

    def to_signs(self) -> np.ndarray:
        """Unpack to an int8 array of +1/-1."""
        return np.where(unpack_bits(self.words, self.length), 1, -1).astype(np.int8)

    def complement(self) -> "BitVector":
        if self.length == 0:
            return self
        words = ~self.words
        words[-1] &= np.uint64(tail_mask(self.length))
        return BitVector(words, self.length)

    @classmethod
    def from_bits(cls, bits) -> "BitVector":
        bits = np.asarray(bits, dtype=bool).ravel()
        return cls(pack_bits(bits), bits.size)


def pack(values: Sequence[int]) -> BitVector:
    """Pack a sequence of +1/-1 values."""
    arr = np.asarray(values)
    if arr.size and not np.all((arr == 1) | (arr == -1)):
        bad = arr[(arr != 1) & (arr != -1)].ravel()[0]
        raise ValueError(f"values must be +1 or -1, got {bad!r}")
    return BitVector.from_bits(arr.ravel() == 1)


def unpack(v: BitVector) -> list[int]:
    return [int(s) for s in v.to_signs()]


def _check_lengths(a: BitVector, b: BitVector) -> None:
    if a.length != b.length:
        raise ValueError(f"length mismatch: {a.length} vs {b.length}")


def xnor(a: BitVector, b: BitVector) -> BitVector:
    _check_lengths(a, b)
    if a.length == 0:
        return a
    words = ~(a.words ^ b.words)
    # XNOR turns the zero tail into ones
    words[-1] &= np.uint64(tail_mask(a.length))
    return BitVector(words, a.length)


def popcount(v: BitVector) -> int:
    return int(kernels.popcount(v.words))


def xnor_dot(a: BitVector, b: BitVector) -> int:
    """Dot product of two +/-1 vectors as ``2 * popcount(xnor(a, b)) - N``."""
    _check_lengths(a, b)
    if a.length == 0:
        raise ValueError("xnor_dot needs at least one element")
    res = kernels.xnor_dot_matrix(a.words[None, :], b.words[None, :], a.length)
    return int(res[0, 0])


def xnor_dot_many(rows: np.ndarray, cols: np.ndarray, nbits: int) -> np.ndarray:
    """All-pairs ``xnor_dot`` between packed row matrices ``rows`` and ``cols``."""
    if nbits == 0:
        raise ValueError("xnor_dot needs at least one element")
    return kernels.xnor_dot_matrix(rows, cols, nbits)


def hamming_tree_stages(n: int) -> int:
    """Depth of a balanced adder tree summing ``n`` bits: ``ceil(log2(n))``."""
    if n < 1:
        raise ValueError("hamming tree needs n >= 1")
    return (n - 1).bit_length()
