"""Blockwise symmetric quantization and what its scales give away.

The scale of a block is ``q_s = N / max|W|`` with ``N = 2**b - 1`` (or
``2**(b-1) - 1`` under the ``symmetric`` convention). The weight of largest
magnitude always lands on code ``+-N`` and dequantizes back to itself, so
anyone who knows the scale knows that weight.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AllZeroBlock


@dataclass(frozen=True)
class QuantScheme:
    bits: int = 8
    block_size: int | None = None  # None means one block for the whole tensor
    convention: str = "full"

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError("bits must be >= 2")
        if self.block_size is not None and self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.convention not in ("full", "symmetric"):
            raise ValueError(f"unknown convention {self.convention!r}")

    @property
    def numerator(self) -> int:
        return 2**self.bits - 1 if self.convention == "full" else 2 ** (self.bits - 1) - 1


def _max_abs(block) -> float:
    w = np.asarray(block, dtype=np.float64)
    if w.size == 0:
        raise AllZeroBlock("empty block")
    m = float(np.abs(w).max())
    if m == 0:
        raise AllZeroBlock("block has no non-zero weight")
    return m


def derive_scale(block, bits: int = 8, convention: str = "full") -> float:
    return QuantScheme(bits, convention=convention).numerator / _max_abs(block)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(block, scheme: QuantScheme) -> tuple[np.ndarray, float]:
    """Integer codes of one block and the block's max magnitude."""
    w = np.asarray(block, dtype=np.float64)
    m = _max_abs(w)
    n = scheme.numerator
    codes = np.clip(_round_half_away(w * (n / m)), -n, n)
    return codes.astype(np.int64), m


def dequantize(codes, max_abs: float, scheme: QuantScheme) -> np.ndarray:
    """``code / q_s``, evaluated as ``(code / N) * max|W|`` so code ``+-N`` is exact."""
    return np.asarray(codes, dtype=np.float64) / scheme.numerator * max_abs


def blocks(size: int, scheme: QuantScheme) -> list[tuple[int, int]]:
    """``[start, stop)`` ranges of the flattened tensor, one per block."""
    bs = size if scheme.block_size is None else scheme.block_size
    return [(a, min(a + bs, size)) for a in range(0, size, bs)]


def quantize_tensor(weights, scheme: QuantScheme) -> tuple[np.ndarray, np.ndarray]:
    """Blockwise codes (tensor shape) and per-block max magnitudes."""
    w = np.asarray(weights, dtype=np.float64)
    flat = w.ravel()
    codes = np.empty(flat.shape, dtype=np.int64)
    maxes = []
    for a, b in blocks(flat.size, scheme):
        codes[a:b], m = quantize(flat[a:b], scheme)
        maxes.append(m)
    return codes.reshape(w.shape), np.array(maxes)


def dequantize_tensor(codes, maxes, scheme: QuantScheme) -> np.ndarray:
    c = np.asarray(codes)
    flat = c.ravel()
    out = np.empty(flat.shape, dtype=np.float64)
    for (a, b), m in zip(blocks(flat.size, scheme), maxes):
        out[a:b] = dequantize(flat[a:b], m, scheme)
    return out.reshape(c.shape)


@dataclass
class BlockLeak:
    start: int
    stop: int
    scale: float
    pinned_index: int
    pinned_value: float
    unknown_weights: int


@dataclass
class QuantReport:
    shape: tuple[int, ...]
    scheme: QuantScheme
    blocks: list[BlockLeak]
    bits_per_unknown_weight: float

    @property
    def pinned_count(self) -> int:
        return len(self.blocks)

    @property
    def remaining_bits(self) -> float:
        return sum(b.unknown_weights for b in self.blocks) * self.bits_per_unknown_weight

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "bits": self.scheme.bits,
            "block_size": self.scheme.block_size,
            "convention": self.scheme.convention,
            "pinned_count": self.pinned_count,
            "bits_per_unknown_weight": self.bits_per_unknown_weight,
            "remaining_bits": self.remaining_bits,
            "blocks": [vars(b) for b in self.blocks],
        }


def pinned_count(shape, scheme: QuantScheme) -> int:
    """Weights an attacker learns from the scales alone: one per block."""
    return len(blocks(math.prod(shape), scheme))


def leakage_report(weights, scheme: QuantScheme) -> QuantReport:
    """Per block: the pinned extremal weight (recovered from the scale) and what remains unknown.

    The pinned value is the dequantized code of the largest-magnitude weight,
    i.e. the signed value an attacker reconstructs from ``q_s`` and the sign.
    Each remaining weight is one of ``2N + 1`` codes.
    """
    w = np.asarray(weights, dtype=np.float64)
    flat = w.ravel()
    out = []
    for a, b in blocks(flat.size, scheme):
        block = flat[a:b]
        codes, m = quantize(block, scheme)
        i = int(np.abs(block).argmax())
        out.append(BlockLeak(a, b, scheme.numerator / m, a + i, float(dequantize(codes[i], m, scheme)), b - a - 1))
    return QuantReport(tuple(w.shape), scheme, out, math.log2(2 * scheme.numerator + 1))
