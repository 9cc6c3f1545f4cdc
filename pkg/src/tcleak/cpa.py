"""Warp-level correlation power analysis.

Hypotheses are enumerated in a :class:`CandidateSpace`, turned into predicted
warp power by an instruction model (:class:`ImmaModel`, :class:`HmmaModel`)
and correlated against every trace sample with one-pass float64 accumulators.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import kernel
from .errors import (
    BadRange,
    InsufficientKnowledge,
    TruthNotInSpace,
    UnknownBaseline,
)
from .traceio import TraceMeta, TraceSet

DEFAULT_CHUNK = 2048


# ---------------------------------------------------------------------------
# candidate spaces


@dataclass(frozen=True)
class CandidateSpace:
    """Enumerated hypotheses for one weight.

    ``values`` holds int8 weights (kind ``int8``) or bfloat16 bit patterns
    (kind ``bf16``).
    """

    kind: str
    values: np.ndarray
    lo: float | None = None
    hi: float | None = None
    include_negative: bool = True

    def __len__(self):
        return len(self.values)

    @property
    def count(self) -> int:
        return len(self.values)

    def index_of(self, value) -> int:
        value = int(value)
        hits = np.flatnonzero(self.values.astype(np.int64) == value)
        if hits.size == 0:
            raise TruthNotInSpace(f"{value:#x} is not a candidate")
        return int(hits[0])

    def as_float(self) -> np.ndarray:
        if self.kind == "bf16":
            return kernel.bf16_to_f32(self.values).astype(np.float64)
        return self.values.astype(np.float64)


def int8_space() -> CandidateSpace:
    return CandidateSpace("int8", np.arange(-128, 128, dtype=np.int16))


def enumerate_bf16(lo: float, hi: float, include_negative: bool = True) -> CandidateSpace:
    """All finite bfloat16 patterns with ``lo < |value| < hi``, by full scan."""
    if lo < 0 or lo > hi or not np.isfinite(lo) or np.isnan(hi):
        raise BadRange(f"need 0 <= lo <= hi, got lo={lo}, hi={hi}")
    patterns = np.arange(1 << 16, dtype=np.uint32).astype(np.uint16)
    with np.errstate(invalid="ignore"):
        mag = np.abs(kernel.bf16_to_f32(patterns).astype(np.float64))
    keep = np.isfinite(mag) & (mag > lo) & (mag < hi)
    if not include_negative:
        keep &= patterns < 0x8000
    return CandidateSpace("bf16", patterns[keep], float(lo), float(hi), include_negative)


# ---------------------------------------------------------------------------
# leakage prediction


def predict_imma(candidates, inputs, baseline=0) -> np.ndarray:
    """Summed HD of ``baseline -> baseline + c*x`` over the parallel results.

    ``inputs`` is ``(T, n)`` (the target-position input of each parallel
    result), ``baseline`` broadcasts against it. Returns ``(C, T)``.
    """
    c = np.asarray(candidates, dtype=np.int64).reshape(-1, 1, 1)
    x = np.asarray(inputs, dtype=np.int64)
    if x.ndim == 1:
        x = x[None, :]
    b = np.broadcast_to(np.asarray(baseline, dtype=np.int64), x.shape)
    after = kernel.as_u32(b[None] + c * x[None])
    return np.bitwise_count(kernel.as_u32(b)[None] ^ after).sum(axis=-1).astype(np.float64)


@dataclass
class ImmaModel:
    """Prediction model for the IMMA chosen-input attack on one weight.

    ``known_weights`` maps depth index to the already recovered weight of the
    attacked column; their input contributions form the known baseline.
    ``n_parallel=16`` is the warp-level model, ``1`` the single-result one.
    """

    target_row: int = 0
    n_parallel: int = 16
    known_weights: Mapping[int, int] = field(default_factory=dict)
    accumulator_init: int = 0

    def predict(self, candidates, tiles) -> np.ndarray:
        tiles = np.asarray(tiles, dtype=np.int64)[:, : self.n_parallel, :]
        x = tiles[:, :, self.target_row]
        base = np.full(x.shape, int(self.accumulator_init), dtype=np.int64)
        for j in range(tiles.shape[2]):
            if j == self.target_row:
                continue
            col = tiles[:, :, j]
            if not col.any():
                continue
            if j not in self.known_weights:
                raise UnknownBaseline(f"input position {j} is non-zero but its weight is unknown")
            base += col * int(self.known_weights[j])
        base = kernel.wrap_i32(base).astype(np.int64)
        out = np.empty((len(np.atleast_1d(candidates)), len(x)))
        step = max(1, 65536 // max(1, x.shape[1]) // 16)
        for a in range(0, len(x), step):
            out[:, a:a + step] = predict_imma(candidates, x[a:a + step], base[a:a + step])
        return out


def predict_hmma(candidates, x_target, s2, register_before=0.0) -> np.ndarray:
    """Fixed-s2 prediction ``HD(before, bits(s2 + c*x_target))`` summed over rows.

    ``x_target`` is ``(T, n)`` bfloat16 patterns, ``s2`` broadcasts against it.
    Returns ``(C, T)``.
    """
    c = kernel.bf16_to_f32(np.asarray(candidates)).reshape(-1, 1, 1)
    x = kernel.bf16_to_f32(np.atleast_2d(x_target))
    s2 = np.asarray(s2, dtype=np.float32)
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        s = s2 + c * x[None]
    before = kernel.f32_bits(np.float32(register_before))
    return np.bitwise_count(before ^ kernel.f32_bits(s)).sum(axis=-1).astype(np.float64)


@dataclass
class HmmaModel:
    """Prediction model for one bfloat16 weight of an HMMA dot product.

    Sequential mode: every non-target weight is in ``known_weights`` and each
    register is recomputed in instruction order with the candidate inserted.
    Fixed-s2 mode: ``fixed_s2`` gives the constant rest-of-sum (scalar or one
    value per parallel row) and only ``s1 = c * x_target`` varies.
    """

    target_index: int = 7
    known_weights: Mapping[int, int] | Sequence[int | None] = field(default_factory=dict)
    n_parallel: int = 16
    accumulator_init: float = 0.0
    register_before: float | None = None
    fixed_s2: float | np.ndarray | None = None

    def _known(self) -> dict[int, int]:
        items = self.known_weights.items() if isinstance(self.known_weights, Mapping) else enumerate(self.known_weights)
        return {int(i): int(w) for i, w in items if w is not None and int(i) != self.target_index}

    @property
    def mode(self) -> str:
        if len(self._known()) == kernel.HMMA_DEPTH - 1:
            return "sequential"
        if self.fixed_s2 is not None:
            return "fixed_s2"
        raise InsufficientKnowledge("need all 7 non-target weights or a fixed s2")

    def predict(self, candidates, tiles) -> np.ndarray:
        tiles = np.asarray(tiles)[:, : self.n_parallel, :]
        before = self.accumulator_init if self.register_before is None else self.register_before
        mode = self.mode
        cands = np.atleast_1d(candidates)
        out = np.empty((len(cands), len(tiles)))
        step = max(1, 65536 // max(1, tiles.shape[1]) // 8)
        for a in range(0, len(tiles), step):
            t = tiles[a:a + step]
            if mode == "fixed_s2":
                out[:, a:a + step] = predict_hmma(cands, t[:, :, self.target_index], self.fixed_s2, before)
                continue
            known = self._known()
            x = kernel.bf16_to_f32(t)  # (T, n, 8)
            c = kernel.bf16_to_f32(cands).reshape(-1, 1, 1)
            s = np.broadcast_to(np.float32(self.accumulator_init), (len(cands),) + x.shape[:2]).astype(np.float32)
            with np.errstate(over="ignore", invalid="ignore", under="ignore"):
                for i in range(kernel.HMMA_DEPTH):
                    w = c if i == self.target_index else kernel.bf16_to_f32(np.uint16(known[i]))
                    s = s + w * x[None, :, :, i]
            bits = kernel.f32_bits(np.float32(before))
            out[:, a:a + step] = np.bitwise_count(bits ^ kernel.f32_bits(s)).sum(axis=-1)
        return out


# ---------------------------------------------------------------------------
# correlation


@dataclass
class CpaResult:
    """Pearson correlation of every candidate with every sample.

    Excluded entries (zero-variance candidate or sample) are NaN in ``corr``
    and flagged in the two masks.
    """

    corr: np.ndarray
    n_traces: int
    excluded_candidates: np.ndarray
    excluded_samples: np.ndarray
    truth_index: int | None = None

    def peaks(self, window: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Max ``|rho|`` per candidate over ``window`` and the sample where it occurs.

        Excluded candidates get ``-inf`` so they rank below every finite peak.
        """
        lo, hi = window if window is not None else (0, self.corr.shape[1])
        sub = np.abs(self.corr[:, lo:hi])
        sub = np.where(np.isnan(sub), -np.inf, sub)
        arg = sub.argmax(axis=1)
        peak = sub[np.arange(len(sub)), arg]
        return peak, arg + lo

    def best(self, window=None) -> int:
        return int(self.peaks(window)[0].argmax())


class CorrelationAccumulator:
    """Streaming Pearson correlation between predictions and trace samples.

    Sums of shifted values (shift = first seen row) keep the one-pass formula
    numerically stable. Traces must be fed in a fixed order for bit-identical
    results.
    """

    def __init__(self):
        self.n = 0

    def update(self, predictions: np.ndarray, traces: np.ndarray) -> None:
        h = np.asarray(predictions, dtype=np.float64)
        y = np.asarray(traces, dtype=np.float64)
        if h.ndim != 2 or y.ndim != 2 or h.shape[1] != y.shape[0]:
            raise ValueError(f"predictions {h.shape} do not match traces {y.shape}")
        if self.n == 0:
            self._h0 = h[:, :1].copy()
            self._y0 = y[:1].copy()
            C, S = h.shape[0], y.shape[1]
            self.sh = np.zeros(C)
            self.shh = np.zeros(C)
            self.sy = np.zeros(S)
            self.syy = np.zeros(S)
            self.shy = np.zeros((C, S))
        h = h - self._h0
        y = y - self._y0
        self.n += y.shape[0]
        self.sh += h.sum(axis=1)
        self.shh += np.einsum("ct,ct->c", h, h)
        self.sy += y.sum(axis=0)
        self.syy += np.einsum("ts,ts->s", y, y)
        self.shy += h @ y

    def result(self, truth_index: int | None = None) -> CpaResult:
        n = self.n
        var_h = n * self.shh - self.sh**2
        var_y = n * self.syy - self.sy**2
        bad_h = var_h <= 1e-12 * n * self.shh
        bad_y = var_y <= 1e-12 * n * self.syy
        cov = n * self.shy - np.outer(self.sh, self.sy)
        with np.errstate(invalid="ignore", divide="ignore"):
            rho = cov / np.sqrt(np.outer(np.where(bad_h, np.nan, var_h), np.where(bad_y, np.nan, var_y)))
        rho = np.clip(rho, -1.0, 1.0)
        return CpaResult(rho, n, bad_h, bad_y, truth_index)


def correlate(predictions: np.ndarray, traces) -> CpaResult:
    """One-shot Pearson matrix of ``(C, T)`` predictions against ``(T, S)`` traces."""
    samples = traces.samples if isinstance(traces, TraceSet) else traces
    acc = CorrelationAccumulator()
    for a in range(0, samples.shape[0], DEFAULT_CHUNK):
        acc.update(predictions[:, a:a + DEFAULT_CHUNK], samples[a:a + DEFAULT_CHUNK])
    return acc.result()


def key_rank(result: CpaResult, truth_index: int, window=None) -> int:
    """Number of candidates whose peak ``|rho|`` strictly exceeds the truth's."""
    if not 0 <= truth_index < result.corr.shape[0]:
        raise TruthNotInSpace(f"truth index {truth_index} outside the candidate space")
    peak, _ = result.peaks(window)
    return int(np.sum(peak > peak[truth_index]))


@dataclass
class RankCurve:
    checkpoints: list[tuple[int, int]]

    @property
    def final_rank(self) -> int:
        return self.checkpoints[-1][1]

    def traces_to_rank0(self) -> int | None:
        """First checkpoint after which the rank stays 0, ``None`` if never."""
        first = None
        for n, r in self.checkpoints:
            if r == 0:
                if first is None:
                    first = n
            else:
                first = None
        return first


@dataclass
class AttackResult:
    result: CpaResult
    curve: RankCurve | None


def stream_attack(
    n_traces: int,
    predict: Callable[[int, int], np.ndarray],
    samples: Callable[[int, int], np.ndarray],
    step: int | None = None,
    truth_index: int | None = None,
    window=None,
    chunk: int = DEFAULT_CHUNK,
) -> AttackResult:
    """Run the accumulator over traces ``0..n_traces`` in order.

    ``predict(a, b)`` returns the ``(C, b-a)`` predictions and ``samples(a, b)``
    the ``(b-a, S)`` trace rows. With ``step`` and ``truth_index`` the key rank
    is recorded every ``step`` traces and at the end.
    """
    acc = CorrelationAccumulator()
    bounds = set(range(0, n_traces, chunk)) | {n_traces}
    if step:
        bounds |= set(range(step, n_traces, step))
    bounds = sorted(bounds)
    checkpoints = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        acc.update(predict(a, b), samples(a, b))
        if step and truth_index is not None and (b % step == 0 or b == n_traces):
            checkpoints.append((b, key_rank(acc.result(), truth_index, window)))
    result = acc.result(truth_index)
    curve = RankCurve(checkpoints) if checkpoints else None
    return AttackResult(result, curve)


def planted_truth(meta: TraceMeta, site: int = 0, row: int | None = None):
    """Ground-truth value of the attacked weight recorded by the simulator.

    ``row`` defaults to the scenario's ``target_row``.
    """
    sc = meta.scenario
    column = sc["sites"][site]["weight_column"]
    return np.asarray(meta.weights)[sc["target_row"] if row is None else row, column].item()


def attack(
    ts: TraceSet,
    meta: TraceMeta,
    space: CandidateSpace,
    model,
    site: int = 0,
    step: int | None = None,
    truth=None,
    window=None,
    chunk: int = DEFAULT_CHUNK,
) -> AttackResult:
    """First-order CPA on ``ts`` using the inputs recorded for ``site``.

    ``truth`` is a weight value (int8 or bf16 pattern); it enables key-rank
    tracking. Pass ``truth="planted"`` to take it from simulator metadata.
    """
    if meta.inputs is None:
        raise ValueError("metadata carries no per-trace inputs")
    if isinstance(truth, str) and truth == "planted":
        truth = planted_truth(meta, site)
    truth_index = None if truth is None else space.index_of(truth)
    tiles = meta.inputs[:, site]
    return stream_attack(
        ts.n_traces,
        lambda a, b: model.predict(space.values, tiles[a:b]),
        lambda a, b: ts.samples[a:b],
        step=step,
        truth_index=truth_index,
        window=window,
        chunk=chunk,
    )


def cpa(ts, meta, space, model, site=0, window=None) -> CpaResult:
    return attack(ts, meta, space, model, site=site, window=window).result


def rank_curve(ts, meta, space, model, step: int, site=0, truth="planted", window=None) -> RankCurve:
    return attack(ts, meta, space, model, site=site, step=step, truth=truth, window=window).curve
