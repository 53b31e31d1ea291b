"""Shared key types: packed bit strings, binary entropy and the epsilon budget."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class LengthMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BitString:
    """Immutable bit sequence packed MSB-first, 8 bits per byte.

    Padding bits in the final byte are always zero so two strings with the
    same bits compare (and serialize) identically.
    """

    data: bytes
    length: int

    def __post_init__(self):
        if self.length < 0:
            raise ValueError("length must be non-negative")
        if len(self.data) != (self.length + 7) // 8:
            raise ValueError(
                f"{len(self.data)} bytes cannot hold exactly {self.length} bits")
        pad = (-self.length) % 8
        if pad and self.data[-1] & ((1 << pad) - 1):
            raise ValueError("padding bits must be zero")

    @classmethod
    def from_bits(cls, bits) -> BitString:
        arr = np.asarray(bits, dtype=np.uint8).ravel()
        if arr.size and arr.max() > 1:
            raise ValueError("bits must be 0 or 1")
        return cls(np.packbits(arr).tobytes(), int(arr.size))

    @classmethod
    def from_str(cls, text: str) -> BitString:
        return cls.from_bits([int(c) for c in text])

    @classmethod
    def zeros(cls, length: int) -> BitString:
        return cls(bytes((length + 7) // 8), length)

    @classmethod
    def random(cls, length: int, rng: np.random.Generator) -> BitString:
        return cls.from_bits(rng.integers(0, 2, size=length, dtype=np.uint8))

    @cached_property
    def bits(self) -> np.ndarray:
        """Unpacked read-only uint8 view of the bits."""
        arr = np.unpackbits(np.frombuffer(self.data, dtype=np.uint8),
                            count=self.length)
        arr.flags.writeable = False
        return arr

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitString):
            return NotImplemented
        return self.length == other.length and self.data == other.data

    def __hash__(self) -> int:
        return hash((self.length, self.data))

    def __xor__(self, other: BitString) -> BitString:
        return xor_combine(self, other)

    def __getitem__(self, item) -> BitString:
        if isinstance(item, slice):
            return BitString.from_bits(self.bits[item])
        return int(self.bits[item])

    def __add__(self, other: BitString) -> BitString:
        return BitString.from_bits(np.concatenate([self.bits, other.bits]))

    def weight(self) -> int:
        return int(self.bits.sum())

    def hamming(self, other: BitString) -> int:
        if self.length != other.length:
            raise LengthMismatchError(
                f"lengths differ: {self.length} != {other.length}")
        return (self ^ other).weight()

    def __str__(self) -> str:
        return "".join(map(str, self.bits.tolist()))

    def __repr__(self) -> str:
        if self.length <= 64:
            return f"BitString('{self}')"
        return f"BitString(<{self.length} bits>)"

    @staticmethod
    def concat(parts) -> BitString:
        parts = list(parts)
        if not parts:
            return BitString.zeros(0)
        return BitString.from_bits(np.concatenate([p.bits for p in parts]))


def xor_combine(a: BitString, b: BitString) -> BitString:
    if a.length != b.length:
        raise LengthMismatchError(f"lengths differ: {a.length} != {b.length}")
    out = np.bitwise_xor(np.frombuffer(a.data, dtype=np.uint8),
                         np.frombuffer(b.data, dtype=np.uint8))
    return BitString(out.tobytes(), a.length)


def binary_entropy(q: float) -> float:
    """h(q) = -q log2 q - (1-q) log2(1-q), with 0 log 0 = 0."""
    if not 0.0 <= q <= 1.0 or math.isnan(q):
        raise ValueError(f"binary entropy undefined for q={q}")
    if q == 0.0 or q == 1.0:
        return 0.0
    return -q * math.log2(q) - (1.0 - q) * math.log2(1.0 - q)


@dataclass(frozen=True)
class SecurityParams:
    eps_ver: float = 2e-11
    eps_pa: float = 1e-12
    l_auth: int = 40
    eps_auth: float = field(init=False)

    def __post_init__(self):
        if self.l_auth <= 0:
            raise ValueError("l_auth must be positive")
        object.__setattr__(self, "eps_auth", 2.0 * 2.0 ** (-self.l_auth))
        for name in ("eps_ver", "eps_pa", "eps_auth"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name}={value} outside (0, 1)")


@dataclass(frozen=True)
class EpsilonReport:
    eps_qkd: float
    eps_qkdnet: float
    node_count: int

    def as_dict(self) -> dict:
        return {"eps_qkd": self.eps_qkd, "eps_qkdnet": self.eps_qkdnet,
                "node_count": self.node_count}


def compose_epsilon(params: SecurityParams, node_count: int) -> EpsilonReport:
    """Per-link failure probability and its end-to-end composition over a chain.

    Each of the ``node_count - 1`` hops contributes its link failure
    probability plus one more authentication term for the relay traffic.
    """
    if node_count < 2:
        raise ValueError(f"need at least 2 nodes, got {node_count}")
    eps_qkd = params.eps_ver + params.eps_pa + params.eps_auth
    eps_net = (node_count - 1) * (eps_qkd + params.eps_auth)
    return EpsilonReport(eps_qkd=eps_qkd, eps_qkdnet=eps_net,
                         node_count=node_count)
