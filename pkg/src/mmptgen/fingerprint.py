"""Circular (Morgan) bit fingerprints and set similarities."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from mmptgen.fragment import ATOMIC_NUMBER, Fragment

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

DEFAULT_RADIUS = 2
DEFAULT_NBITS = 2048


class LengthMismatch(ValueError):
    pass


class ZeroVector(ValueError):
    pass


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def hash_ints(values: Iterable[int]) -> int:
    """FNV-1a over the little-endian signed 64-bit encoding of ``values``."""
    data = b"".join(struct.pack("<q", v) for v in values)
    return fnv1a_64(data)


@dataclass(frozen=True)
class FingerprintVec:
    nbits: int
    radius: int
    on_bits: frozenset[int]

    def __post_init__(self) -> None:
        if self.nbits <= 0 or self.nbits & (self.nbits - 1):
            raise ValueError(f"nbits must be a power of two, got {self.nbits}")

    @classmethod
    def from_bits(cls, bits: Iterable[int], nbits: int = DEFAULT_NBITS, radius: int = 0) -> "FingerprintVec":
        bits = frozenset(bits)
        if any(b < 0 or b >= nbits for b in bits):
            raise ValueError("bit index out of range")
        return cls(nbits, radius, bits)

    @property
    def popcount(self) -> int:
        return len(self.on_bits)

    def to_array(self) -> np.ndarray:
        arr = np.zeros(self.nbits, dtype=np.uint8)
        if self.on_bits:
            arr[sorted(self.on_bits)] = 1
        return arr

    def to_words(self) -> np.ndarray:
        """Packed little-endian uint64 words (bit ``i`` lives in word ``i // 64``)."""
        words = np.zeros(max(1, (self.nbits + 63) // 64), dtype=np.uint64)
        for b in self.on_bits:
            words[b >> 6] |= np.uint64(1 << (b & 63))
        return words

    def to_hex(self) -> str:
        value = 0
        for b in self.on_bits:
            value |= 1 << b
        return f"{value:0{self.nbits // 4 or 1}x}"


def _atom_seed(f: Fragment, i: int) -> int:
    atom = f.atoms[i]
    return hash_ints((
        ATOMIC_NUMBER[atom.element],
        int(atom.aromatic),
        f.degree(i),
        atom.charge,
        atom.hcount,
        int(atom.is_wildcard),
    ))


def morgan_identifiers(f: Fragment, radius: int = DEFAULT_RADIUS) -> list[int]:
    """All environment identifiers for radii 0..radius (with repeats)."""
    current = [_atom_seed(f, i) for i in range(len(f.atoms))]
    out = list(current)
    for r in range(1, radius + 1):
        nxt = []
        for i in range(len(f.atoms)):
            env = sorted((int(f.bonds[k].order), current[j]) for j, k in f.neighbors(i))
            values = [r, current[i]]
            for order, ident in env:
                values.extend((order, ident))
            nxt.append(hash_ints(v - (1 << 64) if v >= 1 << 63 else v for v in values))
        current = nxt
        out.extend(current)
    return out


def morgan_fingerprint(f: Fragment, radius: int = DEFAULT_RADIUS, nbits: int = DEFAULT_NBITS) -> FingerprintVec:
    """Morgan fingerprint folded to ``nbits``.

    Identifiers are built from atom invariants and neighbor identifiers only,
    never from atom indices, so isomorphic fragments fingerprint identically.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    bits = {ident % nbits for ident in morgan_identifiers(f, radius)}
    return FingerprintVec(nbits, radius, frozenset(bits))


def _check(a: FingerprintVec, b: FingerprintVec) -> None:
    if a.nbits != b.nbits:
        raise LengthMismatch(f"{a.nbits} != {b.nbits}")


def tanimoto(a: FingerprintVec, b: FingerprintVec) -> float:
    _check(a, b)
    union = len(a.on_bits | b.on_bits)
    if union == 0:
        return 1.0
    return len(a.on_bits & b.on_bits) / union


def cosine_sim(a: FingerprintVec, b: FingerprintVec) -> float:
    _check(a, b)
    if not a.on_bits or not b.on_bits:
        raise ZeroVector("cosine similarity of an empty fingerprint")
    return len(a.on_bits & b.on_bits) / math.sqrt(a.popcount * b.popcount)
