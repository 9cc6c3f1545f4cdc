"""Higher-order CPA over several leak sites that depend on the same weight.

Predictions of the sites are combined by summation and the trace samples by
the square of their sum. The attack then runs the first-order engine on this
single virtual sample.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cpa import DEFAULT_CHUNK, AttackResult, CandidateSpace, planted_truth, stream_attack
from .errors import FewerThanTwoSites, SiteOutOfRange
from .traceio import TraceMeta, TraceSet

PREPROCESSORS = ("squared_sum", "sum", "centered_product")


def combine_predictions(predictions) -> np.ndarray:
    """Sum of per-site predictions (first axis indexes the site)."""
    p = [np.asarray(x, dtype=np.float64) for x in predictions]
    if len(p) < 2:
        raise FewerThanTwoSites("combining needs at least two sites")
    return np.sum(p, axis=0)


def preprocess_samples(values, kind: str = "squared_sum", means=None) -> np.ndarray:
    """Combine per-site sample values (first axis) into one virtual sample.

    ``squared_sum`` is ``(sum values)**2``. ``centered_product`` is the classic
    second-order product of mean-free samples; it is offered for comparison
    only and needs ``means`` (or uses the column means of ``values``).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] < 2:
        raise FewerThanTwoSites("pre-processing needs at least two sites")
    if kind == "squared_sum":
        return v.sum(axis=0) ** 2
    if kind == "sum":
        return v.sum(axis=0)
    if kind == "centered_product":
        mu = v.mean(axis=tuple(range(1, v.ndim)), keepdims=True) if means is None else np.asarray(means).reshape(
            (-1,) + (1,) * (v.ndim - 1))
        return np.prod(v - mu, axis=0)
    raise ValueError(f"unknown pre-processing {kind!r}")


@dataclass
class HoConfig:
    """Site tuple for a higher-order attack.

    ``sites`` are sample indices. ``input_slots`` names, per site, which
    per-trace input record of the metadata feeds its prediction (defaults to
    ``0, 1, 2, ...``).
    """

    sites: list[int]
    input_slots: list[int] | None = None
    preprocess: str = "squared_sum"
    combine: str = "sum"
    models: list = field(default_factory=list)

    def __post_init__(self):
        self.sites = [int(s) for s in self.sites]
        if len(set(self.sites)) < 2:
            raise FewerThanTwoSites("need at least two distinct sites")
        if self.input_slots is None:
            self.input_slots = list(range(len(self.sites)))
        if len(self.input_slots) != len(self.sites):
            raise ValueError("one input slot per site")
        if self.preprocess not in PREPROCESSORS:
            raise ValueError(f"unknown pre-processing {self.preprocess!r}")
        if self.combine != "sum":
            raise ValueError("only the sum combining function is supported")


def virtual_samples(ts: TraceSet, cfg: HoConfig) -> np.ndarray:
    """The pre-processed sample ``t_c`` for every trace, shape ``(n, 1)``."""
    for s in cfg.sites:
        if not 0 <= s < ts.n_samples:
            raise SiteOutOfRange(f"site {s} outside 0..{ts.n_samples - 1}")
    v = ts.samples[:, cfg.sites].astype(np.float64).T
    return preprocess_samples(v, cfg.preprocess)[:, None]


def ho_attack(ts: TraceSet, meta: TraceMeta, space: CandidateSpace, model, cfg: HoConfig,
              step: int | None = None, truth=None, chunk: int = DEFAULT_CHUNK) -> AttackResult:
    """Correlate combined predictions with the pre-processed virtual sample.

    ``model`` is a single predictor shared by all sites, or pass one per site
    in ``cfg.models``.
    """
    models = cfg.models or [model] * len(cfg.sites)
    if isinstance(truth, str) and truth == "planted":
        truth = planted_truth(meta, cfg.input_slots[0])
    truth_index = None if truth is None else space.index_of(truth)
    tc = virtual_samples(ts, cfg)
    tiles = [meta.inputs[:, slot] for slot in cfg.input_slots]

    def predict(a, b):
        return combine_predictions([m.predict(space.values, t[a:b]) for m, t in zip(models, tiles)])

    return stream_attack(ts.n_traces, predict, lambda a, b: tc[a:b], step=step,
                         truth_index=truth_index, chunk=chunk)


def ho_cpa(ts, meta, space, model, cfg: HoConfig):
    return ho_attack(ts, meta, space, model, cfg).result


def suggest_sites(scores, count: int = 3, min_distance: int = 1) -> list[int]:
    """Pick up to ``count`` sample indices with the largest scores.

    ``scores`` is a per-sample statistic such as first-order peak ``|rho|`` or
    TVLA ``|t|``; picks are at least ``min_distance`` samples apart.
    """
    s = np.nan_to_num(np.abs(np.asarray(scores, dtype=np.float64)), nan=-np.inf)
    picked: list[int] = []
    for idx in np.argsort(-s, kind="stable"):
        if all(abs(int(idx) - p) >= min_distance for p in picked):
            picked.append(int(idx))
        if len(picked) == count:
            break
    return sorted(picked)
