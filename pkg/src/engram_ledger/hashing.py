"""Digests for the ledger and a sparse k-winners-take-all separator.

The separator is the hippocampal counterpart of the hash: a fixed random
projection followed by k-WTA maps similar inputs onto sparse, decorrelated
codes.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .prng import splitmix64_block

DIGEST_SIZE = 32
HEADER_SIZE = 8 + DIGEST_SIZE + DIGEST_SIZE + 8 + 8
_HEADER = struct.Struct(">Q32s32sQQ")


class DimensionMismatch(ValueError):
    pass


class DegenerateInput(ValueError):
    pass


class PopulationMismatch(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Digest:
    """A 256-bit digest; ordering is lexicographic on the raw bytes."""

    value: bytes

    def __post_init__(self):
        if not isinstance(self.value, bytes) or len(self.value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes")

    @classmethod
    def zero(cls) -> "Digest":
        return cls(bytes(DIGEST_SIZE))

    @classmethod
    def from_hex(cls, text: str) -> "Digest":
        return cls(bytes.fromhex(text))

    def hex(self) -> str:
        return self.value.hex()

    def leading_zero_bits(self) -> int:
        n = int.from_bytes(self.value, "big")
        return DIGEST_SIZE * 8 - n.bit_length()

    def __str__(self) -> str:
        return self.hex()

    def __repr__(self) -> str:
        return f"Digest({self.hex()[:16]}…)"


def hash_bytes(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def encode_header(index: int, prev_digest: Digest, payload_digest: Digest,
                  timestamp: int, puzzle_nonce: int) -> bytes:
    return _HEADER.pack(index, prev_digest.value, payload_digest.value,
                        timestamp, puzzle_nonce)


def decode_header(data: bytes) -> tuple[int, Digest, Digest, int, int]:
    index, prev, payload, timestamp, nonce = _HEADER.unpack(data)
    return index, Digest(prev), Digest(payload), timestamp, nonce


def block_digest(header_bytes: bytes) -> Digest:
    """Digest of a canonically encoded header; used for linkage and the puzzle."""
    return hash_bytes(header_bytes)


# --- sparse pattern separation -------------------------------------------


@dataclass(frozen=True)
class SeparatorParams:
    input_dim: int = 1024
    n_total: int = 2048
    k: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.n_total < 1 or self.k < 1:
            raise ValueError("input_dim, n_total and k must be positive")
        if self.k * 10 > self.n_total:
            raise ValueError("k must not exceed n_total / 10")
        if not 0 <= self.seed < 1 << 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class SparseCode:
    active: frozenset
    n_total: int
    k: int

    def __post_init__(self):
        if len(self.active) != self.k:
            raise ValueError("a sparse code must have exactly k active units")
        if self.k * 10 > self.n_total:
            raise ValueError("k must not exceed n_total / 10")
        if any(not 0 <= i < self.n_total for i in self.active):
            raise ValueError("active index out of range")


class OverlapStats(NamedTuple):
    shared: int
    jaccard: float


@lru_cache(maxsize=8)
def projection_matrix(input_dim: int, n_total: int, seed: int) -> np.ndarray:
    """The fixed (n_total, input_dim) matrix of ±1 entries for a seed.

    Entry ``j`` in row-major order takes bit ``j % 64`` (LSB first) of the
    ``j // 64``-th SplitMix64 output; a set bit means +1.
    """
    count = n_total * input_dim
    words = splitmix64_block(seed, -(-count // 64))
    bits = np.unpackbits(words.view(np.uint8), bitorder="little")[:count]
    matrix = bits.astype(np.float64) * 2.0 - 1.0
    matrix.setflags(write=False)
    return matrix.reshape(n_total, input_dim)


def _check_inputs(params: SeparatorParams, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[-1] != params.input_dim:
        raise DimensionMismatch(
            f"expected dimension {params.input_dim}, got {inputs.shape[-1]}")
    if np.any(~np.any(inputs != 0.0, axis=-1)):
        raise DegenerateInput("input vector is all zeros")
    return inputs


def _k_winners(activations: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated activations: equal values keep index order,
    # so the lower index wins a tie
    return np.argsort(-activations, axis=-1, kind="stable")[..., :k]


def sparse_separate(params: SeparatorParams, vector) -> SparseCode:
    x = _check_inputs(params, vector)
    if x.ndim != 1:
        raise DimensionMismatch("sparse_separate takes a single vector")
    winners = separate_many(params, x[None, :])[0]
    return SparseCode(frozenset(int(i) for i in winners), params.n_total, params.k)


def separate_many(params: SeparatorParams, vectors) -> np.ndarray:
    """Row-wise k-WTA winners for a batch, shape (batch, k)."""
    x = _check_inputs(params, np.atleast_2d(vectors))
    proj = projection_matrix(params.input_dim, params.n_total, params.seed)
    return _k_winners(x @ proj.T, params.k)


def code_overlap(a: SparseCode, b: SparseCode) -> OverlapStats:
    if a.n_total != b.n_total:
        raise PopulationMismatch(f"{a.n_total} != {b.n_total}")
    shared = len(a.active & b.active)
    union = len(a.active | b.active)
    return OverlapStats(shared, shared / union if union else 0.0)
