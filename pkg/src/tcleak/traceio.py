"""Trace-set container, binary persistence and trace preprocessing.

File layout (little-endian)::

    magic "KRKN" | u16 version=1 | u8 dtype | u8 reserved=0 | u64 n_traces | u64 n_samples
    payload: n_traces x n_samples samples, row-major

dtype codes: 0 = f32, 1 = i16, 2 = i8. Metadata lives in a UTF-8 JSON sidecar
``<file>.meta.json``; numpy arrays inside it are stored as base64 blobs.
"""
from __future__ import annotations

import base64
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    EmptyGroup,
    OffsetTooLarge,
    TruncatedFile,
    VersionUnsupported,
    WindowTooLarge,
)

MAGIC = b"KRKN"
VERSION = 1
HEADER = struct.Struct("<4sHBBQQ")
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<i2"): 1, np.dtype("i1"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


@dataclass
class TraceSet:
    """An ``n_traces x n_samples`` matrix of leakage samples.

    Storage dtypes are f32, i16 and i8. Preprocessing returns float64 sets,
    which are narrowed to f32 when written.
    """

    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2:
            raise DimMismatch("trace samples must be a 2-D matrix")
        if self.samples.dtype not in (np.float32, np.float64, np.int16, np.int8):
            raise TypeError(f"unsupported sample dtype {self.samples.dtype}")

    @property
    def n_traces(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def dtype(self) -> str:
        return {"float32": "f32", "float64": "f64", "int16": "i16", "int8": "i8"}[self.samples.dtype.name]

    def __len__(self):
        return self.n_traces

    def __getitem__(self, idx) -> "TraceSet":
        rows = self.samples[idx]
        return TraceSet(rows if rows.ndim == 2 else rows[None, :])


@dataclass
class TraceMeta:
    """Per-trace bookkeeping bound to a :class:`TraceSet`.

    ``inputs`` has shape ``(n_traces, n_sites, m, k)`` for simulated sets.
    ``extra`` keeps everything else, including keys this version does not know
    about, so a read/write cycle never drops information.
    """

    n_traces: int
    scenario: dict = field(default_factory=dict)
    samples_per_cycle: int = 1
    inputs: np.ndarray | None = None
    groups: np.ndarray | None = None
    weights: np.ndarray | None = None
    jitter: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("inputs", "groups", "jitter"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != self.n_traces:
                raise DimMismatch(f"{name} has {len(arr)} records for {self.n_traces} traces")

    def select(self, idx) -> "TraceMeta":
        """Metadata restricted to the traces picked by ``idx``."""
        idx = np.arange(self.n_traces)[idx]
        take = lambda a: None if a is None else a[idx]  # noqa: E731
        extra = {}
        for k, v in self.extra.items():
            per_trace = isinstance(v, np.ndarray) and v.ndim >= 1 and len(v) == self.n_traces
            extra[k] = v[idx] if per_trace else v
        return TraceMeta(
            n_traces=len(idx),
            scenario=dict(self.scenario),
            samples_per_cycle=self.samples_per_cycle,
            inputs=take(self.inputs),
            groups=take(self.groups),
            weights=self.weights,
            jitter=take(self.jitter),
            extra=extra,
        )

    def to_json(self) -> dict:
        doc = {
            "n_traces": self.n_traces,
            "scenario": _encode(self.scenario),
            "samples_per_cycle": self.samples_per_cycle,
            "inputs": _encode(self.inputs),
            "groups": _encode(self.groups),
            "weights": _encode(self.weights),
            "jitter": _encode(self.jitter),
        }
        for k, v in self.extra.items():
            doc[k] = _encode(v)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TraceMeta":
        known = {"n_traces", "scenario", "samples_per_cycle", "inputs", "groups", "weights", "jitter"}
        return cls(
            n_traces=int(doc["n_traces"]),
            scenario=_decode(doc.get("scenario") or {}),
            samples_per_cycle=int(doc.get("samples_per_cycle", 1)),
            inputs=_decode(doc.get("inputs")),
            groups=_decode(doc.get("groups")),
            weights=_decode(doc.get("weights")),
            jitter=_decode(doc.get("jitter")),
            extra={k: _decode(v) for k, v in doc.items() if k not in known},
        )


def _encode(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        arr = np.ascontiguousarray(value)
        return {
            "__ndarray__": base64.b64encode(arr.astype(arr.dtype.newbyteorder("<")).tobytes()).decode("ascii"),
            "dtype": arr.dtype.newbyteorder("<").str,
            "shape": list(arr.shape),
        }
    if isinstance(value, dict):
        return {str(k): _encode(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _decode(value: Any) -> Any:
    if isinstance(value, dict):
        if "__ndarray__" in value:
            raw = base64.b64decode(value["__ndarray__"])
            return np.frombuffer(raw, dtype=np.dtype(value["dtype"])).reshape(value["shape"]).copy()
        return {k: _decode(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_decode(v) for v in value]
    return value


def meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def write_traces(path, ts: TraceSet, meta: TraceMeta | None = None) -> None:
    """Write ``ts`` (and the ``meta`` sidecar, if given) to ``path``."""
    if meta is not None and meta.n_traces != ts.n_traces:
        raise DimMismatch(f"metadata describes {meta.n_traces} traces, set has {ts.n_traces}")
    samples = ts.samples
    if samples.dtype == np.float64:
        samples = samples.astype(np.float32)
    samples = samples.astype(samples.dtype.newbyteorder("<"), copy=False)
    code = DTYPE_CODES[samples.dtype]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, code, 0, ts.n_traces, ts.n_samples))
        fh.write(np.ascontiguousarray(samples).tobytes())
    if meta is not None:
        meta_path(path).write_text(json.dumps(meta.to_json(), sort_keys=True), encoding="utf-8")


def read_traces(path) -> tuple[TraceSet, TraceMeta | None]:
    path = Path(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < 4 or head[:4] != MAGIC:
            raise BadMagic(f"{path}: not a trace file")
        if len(head) < HEADER.size:
            raise TruncatedFile(f"{path}: header truncated")
        _, version, code, _reserved, n_traces, n_samples = HEADER.unpack(head)
        if version != VERSION:
            raise VersionUnsupported(f"{path}: version {version}")
        if code not in CODE_DTYPES:
            raise VersionUnsupported(f"{path}: unknown dtype code {code}")
        dtype = CODE_DTYPES[code]
        expected = HEADER.size + n_traces * n_samples * dtype.itemsize
        if size < expected:
            raise TruncatedFile(f"{path}: header claims {expected} bytes, file has {size}")
        if size > expected:
            raise DimMismatch(f"{path}: {size - expected} trailing bytes")
        payload = np.frombuffer(fh.read(), dtype=dtype).reshape(n_traces, n_samples)
    ts = TraceSet(payload.astype(dtype.newbyteorder("="), copy=True))
    meta = None
    mp = meta_path(path)
    if mp.exists():
        meta = TraceMeta.from_json(json.loads(mp.read_text(encoding="utf-8")))
        if meta.n_traces != ts.n_traces:
            raise DimMismatch(f"{mp}: metadata describes {meta.n_traces} traces, file has {ts.n_traces}")
    return ts, meta


# ---------------------------------------------------------------------------
# preprocessing


def moving_average(ts: TraceSet, window_cycles: int, samples_per_cycle: int = 1) -> TraceSet:
    """Sliding mean over ``window_cycles`` clock cycles, "valid" edge mode.

    The output has ``m - window + 1`` samples with
    ``out[s] = mean(in[s:s + window])``; see :func:`ma_site_range` for how leak
    sites move.
    """
    window = int(window_cycles) * int(samples_per_cycle)
    if window < 1 or window > ts.n_samples:
        raise WindowTooLarge(f"window {window} not in 1..{ts.n_samples}")
    x = ts.samples.astype(np.float64)
    csum = np.zeros((x.shape[0], x.shape[1] + 1))
    np.cumsum(x, axis=1, out=csum[:, 1:])
    return TraceSet((csum[:, window:] - csum[:, :-window]) / window)


def ma_site_range(site: int, window: int) -> tuple[int, int]:
    """Inclusive range of moving-average outputs whose window covers ``site``."""
    return max(site - window + 1, 0), site


def ma_center_index(site: int, window: int) -> int:
    """Output index whose window is centred on input sample ``site``."""
    return site - (window - 1) // 2


def average_by_input(ts: TraceSet, meta: TraceMeta) -> tuple[TraceSet, TraceMeta]:
    """Average all traces sharing an input-group id, one output row per group.

    Output rows are ordered by group id. Per-group cardinalities are stored in
    ``extra["group_counts"]``; per-trace records are reduced to the first trace
    of each group.
    """
    if meta.groups is None:
        raise EmptyGroup("metadata assigns no input groups")
    groups = np.asarray(meta.groups).astype(np.int64)
    ids, first, inverse, counts = np.unique(groups, return_index=True, return_inverse=True, return_counts=True)
    declared = meta.extra.get("n_groups")
    if declared is not None and len(ids) != int(declared):
        missing = sorted(set(range(int(declared))) - set(ids.tolist()))
        raise EmptyGroup(f"input groups without traces: {missing[:10]}")
    sums = np.zeros((len(ids), ts.n_samples))
    np.add.at(sums, inverse, ts.samples.astype(np.float64))
    out = TraceSet(sums / counts[:, None])
    reduced = meta.select(first)
    reduced.groups = ids
    reduced.jitter = None
    reduced.extra["group_counts"] = counts
    reduced.extra.pop("n_groups", None)
    return out, reduced


def shift(ts: TraceSet, offset: int) -> TraceSet:
    """Translate every trace by ``offset`` samples, filling with the trace mean."""
    offset = int(offset)
    m = ts.n_samples
    if abs(offset) >= m:
        raise OffsetTooLarge(f"|{offset}| >= {m}")
    x = ts.samples.astype(np.float64)
    out = np.repeat(x.mean(axis=1, keepdims=True), m, axis=1)
    if offset >= 0:
        out[:, offset:] = x[:, : m - offset]
    else:
        out[:, :offset] = x[:, -offset:]
    return TraceSet(out)
