"""Synthetic leakage traces for simulated Tensor Core workloads.

A :class:`KernelScenario` places warp executions (:class:`WarpSite`) on a
sample timeline. At each site the warp's register overwrites for one weight
column leak their summed Hamming distance (the warp power). Traces add
mean-centred warp power, per-trace clock slip (jitter) and i.i.d. Gaussian
noise on top of a constant baseline.

Random draws come from independent streams keyed by ``(seed, block, stream)``
where a block is :data:`BLOCK` consecutive traces. Output therefore does not
depend on how blocks are scheduled, and the first ``n`` traces of a longer run
equal a run of ``n`` traces.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import kernel
from .errors import SiteOutOfRange
from .traceio import TraceMeta, TraceSet

BLOCK = 256
CALIBRATION_TRACES = 4096

_NS_MAIN, _NS_CALIBRATION, _NS_FIXED, _NS_GROUPS, _NS_WEIGHTS = range(5)
_S_INPUTS, _S_WEIGHTS, _S_JITTER, _S_PERM, _S_NOISE = range(5)

SHAPES = {"imma": (16, 8, 16), "hmma": (16, 8, 8)}
INPUT_MODES = {"uniform", "chosen_zero", "fixed", "fixed_context"}


@dataclass(frozen=True)
class WarpSite:
    """One warp write-back that leaks the weights of ``weight_column``."""

    warp_id: int
    sample_index: int
    weight_column: int = 0
    parallel_results: int = 16


@dataclass
class KernelScenario:
    """Everything needed to reproduce a simulated trace set.

    ``weights`` is ``(16, 8)`` int8 for IMMA or ``(8, 8)`` bfloat16 patterns
    for HMMA; when omitted it is drawn from ``rng_seed``. The attacked weight
    is ``weights[target_row, site.weight_column]``.

    ``input_mode``:
        ``uniform``        every input random per trace
        ``chosen_zero``    only the ``target_row`` input position is non-zero
        ``fixed``          one input tile for all traces
        ``fixed_context``  fixed tile except a random ``target_row`` position

    ``input_groups`` draws inputs from a pool of that many tiles (trace ``t``
    uses tile ``t % input_groups``), which is what averaging-by-input needs.
    ``shared_inputs`` feeds every site the same tile in a trace.

    ``leak_offset`` overrides the per-site centring constant (by default the
    expected warp power under the scenario's own input distribution).
    """

    kind: str = "imma"
    weights: np.ndarray | None = None
    target_row: int = 0
    input_mode: str = "chosen_zero"
    fixed_inputs: np.ndarray | None = None
    input_groups: int | None = None
    shared_inputs: bool = False
    input_scale: float = 1.0
    weight_mode: str = "fixed"
    weight_scale: float = 0.05
    warp_count: int = 16
    sites: list[WarpSite] = field(default_factory=lambda: [WarpSite(0, 32)])
    samples_per_cycle: int = 1
    trace_length: int = 64
    noise_sigma: float = 0.0
    jitter_max: int = 0
    leak_gain: float = 1.0
    baseline: float = 0.0
    leak_offset: float | list[float] | None = None
    accumulator_init: float = 0
    countermeasure: str = "none"
    rng_seed: int = 0

    def __post_init__(self):
        self.kind = self.kind.lower()
        self.sites = [s if isinstance(s, WarpSite) else WarpSite(**s) for s in self.sites]
        if self.weights is None:
            self.weights = default_weights(self.kind, self.rng_seed)
        else:
            dtype = np.int8 if self.kind == "imma" else np.uint16
            self.weights = np.asarray(self.weights).astype(dtype)
        if self.fixed_inputs is not None:
            self.fixed_inputs = np.asarray(self.fixed_inputs)
        self.validate()

    @property
    def shape(self) -> tuple[int, int, int]:
        return SHAPES[self.kind]

    @property
    def truth(self):
        """Planted value of the attacked weight (for the first site's column)."""
        return self.weights[self.target_row, self.sites[0].weight_column].item()

    def validate(self) -> None:
        if self.kind not in SHAPES:
            raise ValueError(f"unknown kind {self.kind!r}")
        m, n, k = self.shape
        if self.weights.shape != (k, n):
            raise ValueError(f"{self.kind} weights must be {k}x{n}")
        if not 0 <= self.target_row < k:
            raise ValueError(f"target_row must be in 0..{k - 1}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if self.weight_mode not in ("fixed", "random"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")
        if self.countermeasure not in ("none", "shuffle"):
            raise ValueError(f"unknown countermeasure {self.countermeasure!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.jitter_max < 0:
            raise ValueError("jitter_max must be >= 0")
        if self.input_groups is not None and self.input_groups < 1:
            raise ValueError("input_groups must be >= 1")
        if not self.sites:
            raise SiteOutOfRange("scenario has no leak sites")
        for s in self.sites:
            if not self.jitter_max <= s.sample_index < self.trace_length - self.jitter_max:
                raise SiteOutOfRange(
                    f"site at sample {s.sample_index} leaves the trace under jitter "
                    f"±{self.jitter_max} (length {self.trace_length})"
                )
            if not 0 <= s.warp_id < self.warp_count:
                raise SiteOutOfRange(f"warp {s.warp_id} >= warp_count {self.warp_count}")
            if not 0 <= s.weight_column < n:
                raise SiteOutOfRange(f"weight column {s.weight_column} outside 0..{n - 1}")
            if not 1 <= s.parallel_results <= m:
                raise ValueError(f"parallel_results must be in 1..{m}")

    def replace(self, **changes) -> "KernelScenario":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = self.weights.tolist()
        d["fixed_inputs"] = None if self.fixed_inputs is None else self.fixed_inputs.tolist()
        d["sites"] = [dataclasses.asdict(s) for s in self.sites]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KernelScenario":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def default_weights(kind: str, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, _NS_WEIGHTS])
    if kind == "imma":
        w = rng.integers(-127, 128, size=(16, 8))
        w[w == 0] = 1
        return w.astype(np.int8)
    return kernel.f32_to_bf16(rng.normal(0.0, 0.05, size=(8, 8)).astype(np.float32))


def apply_shuffle(scenario: KernelScenario) -> KernelScenario:
    """Copy of ``scenario`` with per-trace shuffling of columns over sites."""
    return scenario.replace(countermeasure="shuffle")


# ---------------------------------------------------------------------------
# random draws


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *key])


def _draw_tiles(sc: KernelScenario, rng: np.random.Generator, count: int) -> np.ndarray:
    """``count`` input tiles drawn according to ``sc.input_mode``."""
    m, _, k = sc.shape
    mode = sc.input_mode
    if mode == "fixed":
        return np.broadcast_to(_fixed_tile(sc), (count, m, k)).copy()
    if sc.kind == "imma":
        if mode == "uniform":
            return rng.integers(-128, 128, size=(count, m, k)).astype(np.int8)
        tiles = np.zeros((count, m, k), np.int8) if mode == "chosen_zero" else np.broadcast_to(
            _fixed_tile(sc), (count, m, k)).copy()
        v = rng.integers(-128, 127, size=(count, m))
        v[v >= 0] += 1  # non-zero int8
        tiles[:, :, sc.target_row] = v
        return tiles
    if mode == "uniform":
        return kernel.f32_to_bf16(rng.normal(0.0, sc.input_scale, size=(count, m, k)).astype(np.float32))
    tiles = np.zeros((count, m, k), np.uint16) if mode == "chosen_zero" else np.broadcast_to(
        _fixed_tile(sc), (count, m, k)).copy()
    v = kernel.f32_to_bf16(rng.normal(0.0, sc.input_scale, size=(count, m)).astype(np.float32))
    v[(v & 0x7FFF) == 0] = 0x3F80  # keep the target input non-zero
    tiles[:, :, sc.target_row] = v
    return tiles


def _fixed_tile(sc: KernelScenario) -> np.ndarray:
    m, _, k = sc.shape
    if sc.fixed_inputs is not None:
        tile = np.asarray(sc.fixed_inputs)
        if tile.shape != (m, k):
            raise ValueError(f"fixed_inputs must be {m}x{k}")
        return tile.astype(np.int8 if sc.kind == "imma" else np.uint16)
    rng = _rng(sc.rng_seed, _NS_FIXED)
    if sc.kind == "imma":
        return rng.integers(-128, 128, size=(m, k)).astype(np.int8)
    return kernel.f32_to_bf16(rng.normal(0.0, sc.input_scale, size=(m, k)).astype(np.float32))


def _group_pool(sc: KernelScenario) -> np.ndarray:
    """``(n_slots, input_groups, m, k)`` pool of input tiles."""
    slots = 1 if sc.shared_inputs else len(sc.sites)
    return np.stack([_draw_tiles(sc, _rng(sc.rng_seed, _NS_GROUPS, s), sc.input_groups) for s in range(slots)])


def _random_target_weights(sc: KernelScenario, rng: np.random.Generator, count: int) -> np.ndarray:
    if sc.kind == "imma":
        return rng.integers(-128, 128, size=count).astype(np.int8)
    return kernel.f32_to_bf16(rng.normal(0.0, sc.weight_scale, size=count).astype(np.float32))


def _draw_block(sc: KernelScenario, ns: int, block: int, pool=None) -> dict:
    """Raw draws for traces ``block*BLOCK .. (block+1)*BLOCK``."""
    S = len(sc.sites)
    slots = 1 if sc.shared_inputs else S
    start = block * BLOCK
    out = {}
    if pool is not None:
        gid = (np.arange(start, start + BLOCK) % sc.input_groups).astype(np.int64)
        tiles = pool[:, gid]  # (slots, B, m, k)
        out["groups"] = gid
    else:
        rng = _rng(sc.rng_seed, ns, block, _S_INPUTS)
        tiles = np.stack([_draw_tiles(sc, rng, BLOCK) for _ in range(slots)])
    tiles = np.moveaxis(tiles, 0, 1)
    if slots != S:
        tiles = np.repeat(tiles, S, axis=1)
    out["inputs"] = tiles  # (B, S, m, k)
    if sc.weight_mode == "random":
        out["target_weight"] = _random_target_weights(sc, _rng(sc.rng_seed, ns, block, _S_WEIGHTS), BLOCK)
    if sc.jitter_max > 0:
        out["jitter"] = _rng(sc.rng_seed, ns, block, _S_JITTER).integers(
            -sc.jitter_max, sc.jitter_max + 1, size=BLOCK)
    else:
        out["jitter"] = np.zeros(BLOCK, np.int64)
    ident = np.tile(np.arange(S), (BLOCK, 1))
    if sc.countermeasure == "shuffle":
        out["permutation"] = _rng(sc.rng_seed, ns, block, _S_PERM).permuted(ident, axis=1)
    else:
        out["permutation"] = ident
    if sc.noise_sigma > 0 and ns == _NS_MAIN:
        out["noise"] = _rng(sc.rng_seed, ns, block, _S_NOISE).normal(0.0, sc.noise_sigma, size=(BLOCK, sc.trace_length))
    return out


# ---------------------------------------------------------------------------
# leakage


def site_columns(sc: KernelScenario, permutation: np.ndarray) -> np.ndarray:
    """Weight column leaking at each site for each trace, ``(n, S)``."""
    base = np.array([s.weight_column for s in sc.sites])
    return base[permutation]


def site_powers(sc: KernelScenario, inputs: np.ndarray, columns: np.ndarray,
                target_weight: np.ndarray | None = None) -> np.ndarray:
    """Warp power of every site in every trace, ``(n, S)``.

    ``inputs`` is ``(n, S, m, k)``, ``columns`` the per-trace weight column of
    each site and ``target_weight`` an optional per-trace replacement for the
    attacked weight.
    """
    n, S = columns.shape
    out = np.empty((n, S), dtype=np.int64)
    for s, site in enumerate(sc.sites):
        wcol = sc.weights[:, columns[:, s]].T.copy()  # (n, k)
        if target_weight is not None:
            same = columns[:, s] == sc.sites[0].weight_column
            wcol[same, sc.target_row] = target_weight[same]
        x = inputs[:, s]
        if sc.kind == "imma":
            acc0 = np.int64(int(sc.accumulator_init))
            after = kernel.wrap_i32(acc0 + np.einsum("tmk,tk->tm", x.astype(np.int64), wcol.astype(np.int64)))
            hds = kernel.hd(kernel.wrap_i32(acc0), after)
        else:
            acc0 = np.float32(sc.accumulator_init)
            s_reg = kernel.hmma_accumulate(acc0, kernel.bf16_to_f32(wcol)[:, None, :], kernel.bf16_to_f32(x))
            hds = kernel.hd(kernel.f32_bits(acc0), kernel.f32_bits(s_reg))
        out[:, s] = hds[:, : site.parallel_results].sum(axis=1)
    return out


def _simulate(sc: KernelScenario, n_traces: int, ns: int, permutations=None) -> dict:
    n_blocks = -(-n_traces // BLOCK)
    pool = _group_pool(sc) if sc.input_groups is not None else None
    parts = [_draw_block(sc, ns, b, pool) for b in range(n_blocks)]
    draws = {key: np.concatenate([p[key] for p in parts])[:n_traces] for key in parts[0]}
    if permutations is not None:
        permutations = np.asarray(permutations, dtype=np.int64)
        if permutations.shape != draws["permutation"].shape:
            raise ValueError(f"permutations must have shape {draws['permutation'].shape}")
        draws["permutation"] = permutations
    draws["power"] = site_powers(sc, draws["inputs"], site_columns(sc, draws["permutation"]),
                                 draws.get("target_weight"))
    return draws


def warp_power_stats(sc: KernelScenario, n: int = CALIBRATION_TRACES) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation of each site's warp power.

    Estimated from a dedicated calibration stream, so they do not depend on
    how many traces are later synthesized. Columns are taken unshuffled, so a
    shuffled scenario is centred exactly like its unprotected counterpart.
    """
    cal = sc.replace(input_groups=None, noise_sigma=0.0, countermeasure="none")
    power = _simulate(cal, n, _NS_CALIBRATION)["power"].astype(np.float64)
    return power.mean(axis=0), power.std(axis=0)


def synthesize(scenario: KernelScenario, n_traces: int, permutations=None) -> tuple[TraceSet, TraceMeta]:
    """Simulate ``n_traces`` traces of ``scenario``.

    ``permutations`` (``(n_traces, n_sites)``) overrides the shuffle draws.
    Sample ``s`` of trace ``t`` is::

        baseline + noise[t, s] + sum(leak_gain * (power[t, i] - offset[i]))

    over the sites ``i`` whose jittered sample index equals ``s``.
    """
    if n_traces < 1:
        raise ValueError("n_traces must be >= 1")
    sc = scenario
    sc.validate()
    if sc.leak_offset is None:
        offset = warp_power_stats(sc)[0]
    else:
        offset = np.broadcast_to(np.asarray(sc.leak_offset, dtype=np.float64), (len(sc.sites),)).copy()
    d = _simulate(sc, n_traces, _NS_MAIN, permutations)
    traces = np.full((n_traces, sc.trace_length), float(sc.baseline))
    if "noise" in d:
        traces += d["noise"]
    rows = np.arange(n_traces)
    for i, site in enumerate(sc.sites):
        traces[rows, site.sample_index + d["jitter"]] += sc.leak_gain * (d["power"][:, i] - offset[i])
    extra = {
        "site_power": d["power"],
        "leak_offset": offset,
        "site_samples": [s.sample_index for s in sc.sites],
    }
    if sc.countermeasure == "shuffle" or permutations is not None:
        extra["permutation"] = d["permutation"]
    if "target_weight" in d:
        extra["target_weight"] = d["target_weight"]
    if sc.input_groups is not None:
        extra["n_groups"] = sc.input_groups
    if sc.kind == "hmma":
        w = kernel.bf16_to_f32(sc.weights)
        extra["nonfinite_weights"] = int((~np.isfinite(w)).sum())
    meta = TraceMeta(
        n_traces=n_traces,
        scenario=sc.to_dict(),
        samples_per_cycle=sc.samples_per_cycle,
        inputs=d["inputs"],
        groups=d.get("groups"),
        weights=np.asarray(sc.weights),
        jitter=d["jitter"],
        extra=extra,
    )
    return TraceSet(traces.astype(np.float32)), meta
