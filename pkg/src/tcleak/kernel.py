"""Arithmetic of the two Tensor Core instructions and the register values they leak.

Two instruction models are provided:

* ``IMMA.16816.S8.S8``: a 16x16 int8 input tile times a 16x8 int8 weight tile,
  accumulated into 16x8 signed 32-bit registers that wrap modulo 2**32.
* ``HMMA.1688.F32.BF16``: bfloat16 operands multiplied in binary32 and summed
  into a binary32 accumulator, eight products per register.

Everything here is a pure function of its arguments. Leakage is expressed as the
Hamming distance between a register's value before and after the write-back.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptySet, TargetOutOfRange

HMMA_DEPTH = 8


# ---------------------------------------------------------------------------
# bit-level helpers


def as_u32(values) -> np.ndarray:
    """Two's-complement 32-bit pattern of integer ``values`` as ``uint32``."""
    arr = np.asarray(values)
    if arr.dtype == np.uint32:
        return arr
    if arr.dtype.kind == "f":
        raise TypeError("use f32_bits() for floating point registers")
    return (arr.astype(np.int64) & 0xFFFFFFFF).astype(np.uint32)


def f32_bits(values) -> np.ndarray:
    """IEEE-754 binary32 bit pattern of ``values``."""
    return np.asarray(values, dtype=np.float32).view(np.uint32)


def hd(before, after) -> np.ndarray:
    """Elementwise Hamming distance between two 32-bit register patterns."""
    return np.bitwise_count(as_u32(before) ^ as_u32(after)).astype(np.int64)


def hw(values) -> np.ndarray:
    return np.bitwise_count(as_u32(values)).astype(np.int64)


def bf16_to_f32(patterns) -> np.ndarray:
    """Widen bfloat16 bit patterns to binary32 (always exact)."""
    p = np.asarray(patterns).astype(np.uint32) & 0xFFFF
    return (p << np.uint32(16)).view(np.float32)


def f32_to_bf16(values) -> np.ndarray:
    """Round binary32 values to bfloat16 patterns, nearest-even; NaN stays NaN."""
    bits = f32_bits(values).astype(np.uint64)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    out = rounded.astype(np.uint16)
    nan = np.isnan(np.asarray(values, dtype=np.float32))
    if np.any(nan):
        out = np.where(nan, (bits >> 16).astype(np.uint16) | np.uint16(0x0040), out)
    return out


def wrap_i32(values) -> np.ndarray:
    """Reduce integers modulo 2**32 into the signed 32-bit range."""
    return as_u32(values).view(np.int32)


# ---------------------------------------------------------------------------
# leakage points


@dataclass(frozen=True)
class LeakagePoint:
    value_before: int
    value_after: int
    hd: int = field(init=False)

    def __post_init__(self):
        # stored as unsigned 32-bit patterns so signed inputs compare correctly
        object.__setattr__(self, "value_before", int(self.value_before) & 0xFFFFFFFF)
        object.__setattr__(self, "value_after", int(self.value_after) & 0xFFFFFFFF)
        object.__setattr__(self, "hd", bin(self.value_before ^ self.value_after).count("1"))


@dataclass(frozen=True)
class LeakageGrid:
    """Before/after patterns of a grid of registers written by one instruction."""

    before: np.ndarray
    after: np.ndarray

    @property
    def hd(self) -> np.ndarray:
        return hd(self.before, self.after)

    def point(self, *index) -> LeakagePoint:
        return LeakagePoint(int(self.before[index]), int(self.after[index]))

    def points(self) -> list[LeakagePoint]:
        return [LeakagePoint(int(b), int(a)) for b, a in zip(self.before.ravel(), self.after.ravel())]


def warp_power(points) -> float:
    """Summed register-overwrite leakage of the results sharing one weight.

    ``points`` is either an iterable of :class:`LeakagePoint` or an array of
    Hamming distances. Arrays are summed over their last axis, so a batch of
    traces can be processed at once.
    """
    if isinstance(points, np.ndarray):
        if points.size == 0 or points.shape[-1] == 0:
            raise EmptySet("warp_power needs at least one leakage point")
        total = points.sum(axis=-1)
        return float(total) if total.ndim == 0 else total
    points = list(points)
    if not points:
        raise EmptySet("warp_power needs at least one leakage point")
    if isinstance(points[0], LeakagePoint):
        return float(sum(p.hd for p in points))
    return float(sum(int(p) for p in points))


# ---------------------------------------------------------------------------
# IMMA.16816.S8.S8


@dataclass(frozen=True)
class ImmaShape:
    m: int = 16
    n: int = 8
    k: int = 16
    weights_per_kernel_loaded: int = 4

    def __post_init__(self):
        if (self.m, self.n, self.k) != (16, 8, 16):
            raise ValueError("IMMA.16816 has fixed shape m=16, n=8, k=16")
        if not 1 <= self.weights_per_kernel_loaded <= self.k:
            raise ValueError("weights_per_kernel_loaded must be in 1..k")


IMMA = ImmaShape()


@dataclass
class ImmaState:
    accumulators: np.ndarray
    inputs: np.ndarray
    weights: np.ndarray
    shape: ImmaShape = IMMA

    def __post_init__(self):
        s = self.shape
        self.accumulators = np.asarray(self.accumulators)
        self.inputs = np.asarray(self.inputs)
        self.weights = np.asarray(self.weights)
        if self.accumulators.shape != (s.m, s.n):
            raise ValueError(f"accumulators must be {s.m}x{s.n}")
        if self.inputs.shape != (s.m, s.k):
            raise ValueError(f"inputs must be {s.m}x{s.k}")
        if self.weights.shape != (s.k, s.n):
            raise ValueError(f"weights must be {s.k}x{s.n}")
        for name, arr in (("inputs", self.inputs), ("weights", self.weights)):
            if arr.min(initial=0) < -128 or arr.max(initial=0) > 127:
                raise ValueError(f"{name} must be signed 8-bit")
        self.accumulators = wrap_i32(self.accumulators)
        self.inputs = self.inputs.astype(np.int8)
        self.weights = self.weights.astype(np.int8)

    @classmethod
    def zeros(cls, inputs, weights, bias: int = 0) -> "ImmaState":
        return cls(np.full((16, 8), bias, dtype=np.int64), inputs, weights)


def imma_accumulate(accumulators, inputs, weights) -> np.ndarray:
    """Batched ``acc + inputs @ weights`` with wrapping 32-bit accumulators.

    ``inputs`` may carry leading batch axes (``(..., m, k)``); ``weights`` is
    ``(k, n)`` or batched the same way.
    """
    prod = np.matmul(np.asarray(inputs, dtype=np.int64), np.asarray(weights, dtype=np.int64))
    return wrap_i32(np.asarray(accumulators, dtype=np.int64) + prod)


def imma_step(state: ImmaState) -> tuple[ImmaState, LeakageGrid]:
    new_acc = imma_accumulate(state.accumulators, state.inputs, state.weights)
    grid = LeakageGrid(as_u32(state.accumulators), as_u32(new_acc))
    return ImmaState(new_acc, state.inputs, state.weights, state.shape), grid


# ---------------------------------------------------------------------------
# HMMA.1688.F32.BF16


@dataclass
class HmmaState:
    """One accumulator register of an HMMA dot product.

    ``weights`` and ``inputs`` hold eight bfloat16 bit patterns each;
    ``accumulator`` is the binary32 value in the register before the instruction.
    """

    weights: np.ndarray
    inputs: np.ndarray
    accumulator: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights).astype(np.uint16)
        self.inputs = np.asarray(self.inputs).astype(np.uint16)
        if self.weights.shape != (HMMA_DEPTH,) or self.inputs.shape != (HMMA_DEPTH,):
            raise ValueError("HMMA needs exactly 8 weights and 8 inputs")
        self.accumulator = np.float32(self.accumulator)

    @classmethod
    def from_floats(cls, weights, inputs, accumulator: float = 0.0) -> "HmmaState":
        return cls(f32_to_bf16(weights), f32_to_bf16(inputs), accumulator)


@dataclass(frozen=True)
class HmmaResult:
    s_reg: np.float32
    leakage: LeakagePoint
    nonfinite: bool


def hmma_accumulate(accumulator, weights_f32, inputs_f32, order: Sequence[int] | None = None) -> np.ndarray:
    """Left-to-right binary32 dot product, one rounding per product and per add.

    The reduction runs over the last axis of ``weights_f32 * inputs_f32`` (which
    broadcast against each other); ``order`` permutes the summation order.
    """
    w = np.asarray(weights_f32, dtype=np.float32)
    x = np.asarray(inputs_f32, dtype=np.float32)
    depth = np.broadcast_shapes(w.shape, x.shape)[-1]
    idx = range(depth) if order is None else order
    s = np.asarray(accumulator, dtype=np.float32)
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        for i in idx:
            s = s + w[..., i] * x[..., i]
    return np.asarray(s, dtype=np.float32)


def hmma_dot(state: HmmaState, order: Sequence[int] | None = None) -> HmmaResult:
    s = hmma_accumulate(state.accumulator, bf16_to_f32(state.weights), bf16_to_f32(state.inputs), order)
    s = np.float32(s)
    before = int(f32_bits(state.accumulator))
    after = int(f32_bits(s))
    operands = np.concatenate([bf16_to_f32(state.weights), bf16_to_f32(state.inputs)])
    nonfinite = bool(not np.isfinite(s) or not np.all(np.isfinite(operands)))
    return HmmaResult(s, LeakagePoint(before, after), nonfinite)


def hmma_decompose(
    state: HmmaState,
    target_index: int,
    known_prefix: Mapping[int, int] | Sequence[int | None] | None = None,
) -> tuple[np.float32, np.float32]:
    """Split the dot product into the target term ``s1`` and the rest ``s2``.

    ``target_index`` is zero-based (``7`` is the eighth weight). Entries of
    ``known_prefix`` override the state's weights at non-target positions,
    which is how an attacker's recovered weights are plugged in. ``s2`` starts
    from the accumulator and adds the other terms in index order, so
    ``s2 + s1`` equals :func:`hmma_dot` with the target term moved last.
    """
    if not 0 <= target_index < HMMA_DEPTH:
        raise TargetOutOfRange(f"target_index {target_index} outside 0..{HMMA_DEPTH - 1}")
    weights = state.weights.copy()
    for i, w in _known_items(known_prefix):
        if i == target_index or w is None:
            continue
        weights[i] = w
    wf = bf16_to_f32(weights)
    xf = bf16_to_f32(state.inputs)
    others = [i for i in range(HMMA_DEPTH) if i != target_index]
    s2 = np.float32(hmma_accumulate(state.accumulator, wf, xf, others))
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        s1 = np.float32(wf[target_index] * xf[target_index])
    return s1, s2


def _known_items(known) -> Iterable[tuple[int, int | None]]:
    if known is None:
        return []
    if isinstance(known, Mapping):
        return [(int(i), w) for i, w in known.items()]
    return list(enumerate(known))
