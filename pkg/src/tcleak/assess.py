"""Non-specific leakage detection and envelope analytics.

:func:`tvla` runs Welch's t-test between two trace populations, optionally
aggregated over alignment shifts. :func:`count_forward_passes` and
:func:`batch_latency` segment received envelopes into activity bursts.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import EmptySet
from .traceio import TraceSet, shift


@dataclass
class TvlaReport:
    """Per-sample Welch t statistic.

    With alignment aggregation ``t`` holds, per sample, the signed t value of
    the shift with the largest ``|t|`` and ``best_shift`` that shift.
    ``degenerate`` flags samples where both groups are constant.
    """

    t: np.ndarray
    best_shift: np.ndarray
    degenerate: np.ndarray
    threshold: float = 4.5

    @property
    def exceed_indices(self) -> np.ndarray:
        return np.flatnonzero(np.abs(np.nan_to_num(self.t)) > self.threshold)

    @property
    def max_abs_t(self) -> float:
        a = np.abs(self.t[~np.isnan(self.t)])
        return float(a.max()) if a.size else 0.0

    @property
    def leaks(self) -> bool:
        return self.exceed_indices.size > 0


def welch_t(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Welch t per sample (columns) and a mask of zero-variance samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise EmptySet("each TVLA group needs at least two traces")
    degenerate = (np.ptp(a, axis=0) == 0) & (np.ptp(b, axis=0) == 0)
    with np.errstate(invalid="ignore", divide="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # constant columns are flagged as degenerate
        t = stats.ttest_ind(a, b, axis=0, equal_var=False).statistic
    t = np.where(degenerate, np.nan, t)
    return np.asarray(t, dtype=np.float64), degenerate


def tvla(group_a: TraceSet, group_b: TraceSet, align_range: int = 0, threshold: float = 4.5) -> TvlaReport:
    """Fixed-vs-random Welch t-test; ``align_range=k`` aggregates shifts of group b in ``[-k, k]``."""
    a = group_a.samples if isinstance(group_a, TraceSet) else np.asarray(group_a)
    b = group_b.samples if isinstance(group_b, TraceSet) else np.asarray(group_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"groups have {a.shape[1]} and {b.shape[1]} samples")
    t, degenerate = welch_t(a, b)
    best = np.zeros(t.shape, dtype=np.int64)
    score = np.nan_to_num(np.abs(t), nan=-1.0)
    # zero shift first, later shifts must be strictly better
    for k in sorted(range(-align_range, align_range + 1), key=lambda s: (abs(s), s)):
        if k == 0:
            continue
        tk, dk = welch_t(a, shift(TraceSet(b), k).samples)
        sk = np.nan_to_num(np.abs(tk), nan=-1.0)
        better = sk > score
        t = np.where(better, tk, t)
        best = np.where(better, k, best)
        degenerate = np.where(better, dk, degenerate)
        score = np.maximum(score, sk)
    return TvlaReport(t, best, degenerate, threshold)


# ---------------------------------------------------------------------------
# envelopes


@dataclass
class EnvelopeSegmentation:
    threshold: float
    min_gap: int = 1
    segments: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.segments)

    @property
    def durations(self) -> list[int]:
        return [d for _, _, d in self.segments]


def segment_envelope(envelope, threshold: float, min_gap: int = 1) -> EnvelopeSegmentation:
    """Runs above ``threshold``; runs separated by fewer than ``min_gap`` samples merge.

    Segments are ``(start, end, duration)`` with ``end`` exclusive.
    """
    above = np.asarray(envelope, dtype=np.float64) > threshold
    padded = np.concatenate([[False], above, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    merged: list[list[int]] = []
    for s, e in zip(starts, ends):
        if merged and s - merged[-1][1] < min_gap:
            merged[-1][1] = int(e)
        else:
            merged.append([int(s), int(e)])
    return EnvelopeSegmentation(threshold, min_gap, [(s, e, e - s) for s, e in merged])


def count_forward_passes(envelope, threshold: float, min_gap: int = 1) -> tuple[int, list[int]]:
    """Number of activity bursts (one per generated token) and their durations."""
    seg = segment_envelope(envelope, threshold, min_gap)
    return seg.count, seg.durations


@dataclass
class BatchLatency:
    rows: list[tuple[int, int]]
    monotone: bool
    spearman: float


def batch_latency(envelopes: dict, threshold: float, min_gap: int = 1) -> BatchLatency:
    """Total active duration per batch size and how well it tracks the batch size."""
    if len(envelopes) < 2:
        raise EmptySet("need at least two batch sizes")
    rows = []
    for batch in sorted(envelopes):
        seg = segment_envelope(envelopes[batch], threshold, min_gap)
        rows.append((int(batch), int(sum(seg.durations))))
    durations = [d for _, d in rows]
    monotone = all(x <= y for x, y in zip(durations, durations[1:]))
    if len(set(durations)) < 2:
        rho = float("nan")
    else:
        rho = float(stats.spearmanr([b for b, _ in rows], durations).statistic)
    return BatchLatency(rows, monotone, rho)


def burst_envelope(durations, gap: int = 200, lead: int = 100, level: float = 1.0,
                   idle: float = 0.05, noise: float = 0.0, rng=None) -> np.ndarray:
    """Synthetic activity envelope: bursts of the given lengths separated by idle gaps."""
    parts = [np.full(lead, idle)]
    for d in durations:
        parts += [np.full(int(d), level), np.full(gap, idle)]
    env = np.concatenate(parts)
    if noise > 0:
        env = env + np.random.default_rng(rng).normal(0.0, noise, env.shape)
    return np.clip(env, 0.0, None)
