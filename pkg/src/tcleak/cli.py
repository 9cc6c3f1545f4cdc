"""Command-line front end.

Every subcommand reads and writes files, and writes a ``run.json`` echo of its
effective arguments next to its outputs; ``tcleak replay run.json`` re-runs it.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, assess, cpa, higher_order, kernel, plot, quant, rf, synth, traceio
from .errors import TcleakError

DEMO_SCENARIO = {
    "kind": "imma",
    "input_mode": "chosen_zero",
    "target_row": 0,
    "sites": [{"warp_id": 0, "sample_index": 32, "weight_column": 0, "parallel_results": 16}],
    "trace_length": 64,
    "noise_sigma": 12.0,
    "jitter_max": 0,
    "weights": None,
}
DEMO_WEIGHT = 93


class UsageError(Exception):
    """Bad flag combination detected after parsing; exits with status 2."""


# ---------------------------------------------------------------------------
# helpers


def _out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_run(directory: Path, args, extra: dict | None = None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",) and not k.startswith("_")}
    doc = {"tool": "tcleak", "version": __version__, "argv": args._argv, "config": cfg}
    if extra:
        doc.update(extra)
    (directory / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _sites(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad site list {text!r}") from None


def _window(text: str | None):
    if not text:
        return None
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"window must be START:STOP, got {text!r}") from None
    return a, b


def _rf_config(args) -> rf.RfChannelConfig:
    fs = args.fs_hz if args.fs_hz else 4 * args.fc_hz
    return rf.RfChannelConfig(
        carrier_hz=args.fc_hz,
        passband_rate_hz=fs,
        baseband_rate_hz=args.bb_hz,
        rx_bandwidth_hz=args.bw_hz,
        distance_m=args.distance_m,
        glass_loss_db=args.glass_db,
    )


def write_corr_csv(path: Path, result: cpa.CpaResult, space: cpa.CandidateSpace) -> None:
    C, S = result.corr.shape
    vals = space.values.astype(np.int64)
    rows = ((int(vals[c]), s, f"{result.corr[c, s]:.17g}") for c in range(C) for s in range(S))
    _csv(path, ("candidate", "sample", "rho"), rows)


def write_rank_csv(path: Path, curve: cpa.RankCurve) -> None:
    _csv(path, ("n_traces", "rank"), curve.checkpoints)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    if args.scenario:
        doc = json.loads(Path(args.scenario).read_text())
    elif args.demo:
        doc = dict(DEMO_SCENARIO)
    else:
        doc = {"kind": args.kind}
    doc["kind"] = doc.get("kind", args.kind)
    doc["rng_seed"] = args.seed
    for key, flag in (("noise_sigma", args.noise_sigma), ("jitter_max", args.jitter),
                      ("countermeasure", args.countermeasure), ("input_mode", args.input_mode),
                      ("trace_length", args.trace_length), ("input_groups", args.groups),
                      ("weight_mode", args.weight_mode), ("leak_gain", args.leak_gain),
                      ("leak_offset", args.leak_offset), ("target_row", args.target_row),
                      ("baseline", args.baseline), ("accumulator_init", args.accumulator_init)):
        if flag is not None:
            doc[key] = flag
    if args.shared_inputs:
        doc["shared_inputs"] = True
    if args.sites:
        doc["sites"] = [{"warp_id": i, "sample_index": s, "weight_column": 0}
                        for i, s in enumerate(_sites(args.sites))]
    if args.leak_offset_from:
        _, ref = traceio.read_traces(args.leak_offset_from)
        if ref is None or "leak_offset" not in ref.extra:
            raise UsageError(f"{args.leak_offset_from} carries no leak_offset")
        doc["leak_offset"] = np.asarray(ref.extra["leak_offset"], dtype=np.float64).tolist()
    sc = synth.KernelScenario.from_dict(doc)
    if args.demo and not args.scenario:
        w = sc.weights.copy()
        w[sc.target_row, 0] = DEMO_WEIGHT
        sc = sc.replace(weights=w)
    ts, meta = synth.synthesize(sc, args.traces)
    if args.far_field:
        cfg = _rf_config(args)
        ts = rf.far_field_traces(ts, cfg, noise_sigma=args.rx_noise, seed=args.seed)
        meta.extra["rf"] = cfg.to_dict()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    traceio.write_traces(out, ts, meta)
    _write_run(out.parent, args, {"scenario": sc.to_dict()})
    print(f"wrote {ts.n_traces} x {ts.n_samples} traces to {out}")
    return 0


def cmd_preprocess(args) -> int:
    ts, meta = traceio.read_traces(args.input)
    if args.average_by_input:
        if meta is None:
            raise UsageError("--average-by-input needs a metadata sidecar")
        ts, meta = traceio.average_by_input(ts, meta)
    if args.moving_average:
        spc = args.samples_per_cycle or (meta.samples_per_cycle if meta else 1)
        ts = traceio.moving_average(ts, args.moving_average, spc)
        if meta is not None:
            meta.extra["moving_average_window"] = args.moving_average * spc
    if args.shift:
        ts = traceio.shift(ts, args.shift)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    traceio.write_traces(out, ts, meta)
    _write_run(out.parent, args)
    print(f"wrote {ts.n_traces} x {ts.n_samples} traces to {out}")
    return 0


def cmd_tvla(args) -> int:
    a, meta = traceio.read_traces(args.fixed)
    b, _ = traceio.read_traces(args.random)
    k = args.align_range if args.align_range is not None else (meta.samples_per_cycle if meta else 1)
    rep = assess.tvla(a, b, align_range=k, threshold=args.threshold)
    d = _out_dir(args)
    _csv(d / "tvla.csv", ("sample", "t", "best_shift"),
         ((s, f"{rep.t[s]:.17g}", int(rep.best_shift[s])) for s in range(len(rep.t))))
    _write_run(d, args)
    print(json.dumps({"max_abs_t": rep.max_abs_t, "threshold": rep.threshold,
                      "exceed": rep.exceed_indices.tolist(), "degenerate": int(rep.degenerate.sum())}))
    return 0


def _space(args, kind: str) -> cpa.CandidateSpace:
    space = args.space or ("int8" if kind == "imma" else "bf16")
    if space == "int8":
        return cpa.int8_space()
    return cpa.enumerate_bf16(args.lo, args.hi, include_negative=not args.positive_only)


def _known_prefix(args, meta: traceio.TraceMeta, kind: str, column: int, target: int) -> dict[int, int]:
    if args.known_prefix is None:
        return {}
    if args.known_prefix == "planted":
        if meta.weights is None:
            raise UsageError("--known-prefix planted needs ground-truth weights in the metadata")
        col = np.asarray(meta.weights)[:, column]
        return {i: int(w) for i, w in enumerate(col) if i != target}
    doc = json.loads(Path(args.known_prefix).read_text())
    items = doc.get("weights", doc) if isinstance(doc, dict) else doc
    pairs = items.items() if isinstance(items, dict) else enumerate(items)
    known = {}
    for i, w in pairs:
        if w is None or int(i) == target:
            continue
        if kind == "hmma" and isinstance(w, float):
            w = int(kernel.f32_to_bf16(np.float32(w)))
        known[int(i)] = int(w)
    return known


def _model(args, meta: traceio.TraceMeta, site: int):
    sc = meta.scenario
    kind = sc.get("kind", "imma")
    column = sc["sites"][site]["weight_column"] if sc.get("sites") else 0
    target = args.target_index if args.target_index is not None else sc.get("target_row", 0)
    n = args.n_parallel or 16
    known = _known_prefix(args, meta, kind, column, target)
    if kind == "imma":
        return kind, cpa.ImmaModel(target_row=target, n_parallel=n, known_weights=known,
                                   accumulator_init=int(sc.get("accumulator_init", 0)))
    return kind, cpa.HmmaModel(target_index=target, known_weights=known, n_parallel=n,
                               accumulator_init=float(sc.get("accumulator_init", 0.0)),
                               fixed_s2=args.fixed_s2)


def _truth(args, meta, site):
    if args.truth is None:
        if meta.weights is None:
            return None
        if args.target_index is None:
            return "planted"
        return cpa.planted_truth(meta, site, row=args.target_index)
    if args.truth == "none":
        return None
    return int(args.truth, 0)


def cmd_attack(args) -> int:
    ts, meta = traceio.read_traces(args.input)
    if meta is None or meta.inputs is None:
        raise UsageError("attack needs a metadata sidecar with per-trace inputs")
    site = args.slot
    kind, model = _model(args, meta, site)
    space = _space(args, kind)
    truth = _truth(args, meta, site)
    step = args.step if truth is not None else None
    d = _out_dir(args)
    if args.mode == "hocpa":
        sites = _sites(args.sites)
        if len(sites) < 2:
            raise UsageError("attack hocpa needs --sites s1,s2[,s3]")
        slots = _sites(args.slots) or list(range(len(sites)))
        cfg = higher_order.HoConfig(sites, slots, preprocess=args.preprocess)
        res = higher_order.ho_attack(ts, meta, space, model, cfg, step=step, truth=truth)
    else:
        res = cpa.attack(ts, meta, space, model, site=site, step=step, truth=truth, window=_window(args.window))
    write_corr_csv(d / "corr.csv", res.result, space)
    summary = {"candidates": len(space), "n_traces": res.result.n_traces}
    peak, where = res.result.peaks(_window(args.window) if args.mode == "cpa" else None)
    best = int(peak.argmax())
    summary.update(best_candidate=int(space.values[best]), best_peak=float(peak[best]), best_sample=int(where[best]))
    if kind == "hmma":
        summary["best_value"] = float(kernel.bf16_to_f32(space.values[best]))
    if res.curve is not None:
        write_rank_csv(d / "rank.csv", res.curve)
        summary.update(final_rank=res.curve.final_rank, traces_to_rank0=res.curve.traces_to_rank0())
    _write_run(d, args, {"summary": summary})
    print(json.dumps(summary))
    return 0


def cmd_rank(args) -> int:
    data = plot.read_csv(args.corr, "corr")
    cands = np.unique(data["candidate"])
    samples = int(data["sample"].max()) + 1
    corr = np.full((len(cands), samples), np.nan)
    ci = np.searchsorted(cands, data["candidate"])
    corr[ci, data["sample"].astype(np.int64)] = data["rho"]
    res = cpa.CpaResult(corr, 0, np.all(np.isnan(corr), axis=1), np.all(np.isnan(corr), axis=0))
    truth = int(args.truth, 0)
    hits = np.flatnonzero(cands == truth)
    if hits.size == 0:
        raise cpa.TruthNotInSpace(f"{truth} not in {args.corr}")
    print(cpa.key_rank(res, int(hits[0]), _window(args.window)))
    return 0


def _read_envelope(path: str, row: int = 0) -> np.ndarray:
    if path.endswith(".csv"):
        return plot.read_csv(path, "envelope")["value"]
    ts, _ = traceio.read_traces(path)
    return ts.samples[row].astype(np.float64)


def cmd_tokens(args) -> int:
    env = _read_envelope(args.input, args.row)
    seg = assess.segment_envelope(env, args.threshold, args.min_gap)
    d = _out_dir(args)
    _csv(d / "segments.csv", ("start", "end", "duration"), seg.segments)
    _write_run(d, args)
    print(json.dumps({"tokens": seg.count, "durations": seg.durations}))
    return 0


def cmd_batch(args) -> int:
    envs = {}
    for item in args.inputs:
        try:
            b, path = item.split("=", 1)
            envs[int(b)] = _read_envelope(path)
        except ValueError:
            raise UsageError(f"expected BATCH=PATH, got {item!r}") from None
    table = assess.batch_latency(envs, args.threshold, args.min_gap)
    d = _out_dir(args)
    _csv(d / "batch.csv", ("batch", "duration"), table.rows)
    _write_run(d, args)
    print(json.dumps({"rows": table.rows, "monotone": table.monotone, "spearman": table.spearman}))
    return 0


def cmd_quant(args) -> int:
    doc = json.loads(Path(args.weights).read_text())
    w = np.asarray(doc["weights"] if isinstance(doc, dict) else doc, dtype=np.float64)
    scheme = quant.QuantScheme(args.bits, args.block_size, args.convention)
    text = json.dumps(quant.leakage_report(w, scheme).to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        _write_run(Path(args.out).parent, args)
    print(text)
    return 0


def cmd_field_boundary(args) -> int:
    lam = args.lambda_m if args.lambda_m is not None else rf.wavelength(args.freq_hz)
    r = rf.field_boundary(rf.BoundaryQuery(args.d_m, lam))
    print(f"{r:.6f}")
    return 0


def cmd_plot(args) -> int:
    out = plot.plot(args.csv, args.kind, args.out)
    print(f"wrote {out}")
    return 0


def cmd_replay(args) -> int:
    doc = json.loads(Path(args.run).read_text())
    return main(doc["argv"])


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master RNG seed")
    common.add_argument("--out-dir", default=".", help="directory for CSV and run.json outputs")
    common.add_argument("--threads", type=int, default=1, help="worker threads (1 gives the reference output)")

    p = argparse.ArgumentParser(prog="tcleak", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="synthesize a trace set")
    s.add_argument("--kind", choices=["imma", "hmma"], default="imma")
    s.add_argument("--traces", type=int, default=1000)
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--jitter", type=int, help="max clock slip in samples")
    s.add_argument("--countermeasure", choices=["none", "shuffle"])
    s.add_argument("--input-mode", choices=sorted(synth.INPUT_MODES))
    s.add_argument("--trace-length", type=int)
    s.add_argument("--sites", help="comma-separated leak sample indices")
    s.add_argument("--groups", type=int, help="number of distinct inputs (for averaging)")
    s.add_argument("--target-row", type=int, help="0-based index of the attacked weight")
    s.add_argument("--shared-inputs", action="store_true", help="every site sees the same input tile")
    s.add_argument("--baseline", type=float, help="DC level added to every sample")
    s.add_argument("--accumulator-init", type=float, help="known starting accumulator value")
    s.add_argument("--weight-mode", choices=["fixed", "random"], help="random draws fresh weights per trace")
    s.add_argument("--leak-gain", type=float)
    off = s.add_mutually_exclusive_group()
    off.add_argument("--leak-offset", type=float, help="centring constant subtracted from the warp power")
    off.add_argument("--leak-offset-from", metavar="PATH",
                     help="reuse the centring of another trace file (fixed-vs-random TVLA pairs)")
    s.add_argument("--scenario", help="KernelScenario JSON file")
    s.add_argument("--demo", action="store_true", help="use the bundled demo scenario")
    s.add_argument("--far-field", action="store_true", help="pass traces through the RF channel")
    s.add_argument("--distance-m", type=float, default=0.25)
    s.add_argument("--glass-db", type=float, default=0.0)
    s.add_argument("--fc-hz", type=float, default=2.565e9)
    s.add_argument("--fs-hz", type=float, help="passband rate (default 4x carrier)")
    s.add_argument("--bw-hz", type=float, default=2e6)
    s.add_argument("--bb-hz", type=float, default=4e6, help="baseband (trace) sample rate")
    s.add_argument("--rx-noise", type=float, default=0.0, help="receiver noise std per I/Q component")
    s.add_argument("--out", default="traces.bin")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", parents=[common], help="moving average / averaging / shift")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--moving-average", type=int, metavar="WCYCLES")
    s.add_argument("--samples-per-cycle", type=int)
    s.add_argument("--average-by-input", action="store_true")
    s.add_argument("--shift", type=int, default=0)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("tvla", parents=[common], help="fixed-vs-random Welch t-test")
    s.add_argument("--fixed", required=True)
    s.add_argument("--random", required=True)
    s.add_argument("--align-range", type=int, help="aggregate over shifts in [-k, k] (default samples per cycle)")
    s.add_argument("--threshold", type=float, default=4.5)
    s.set_defaults(func=cmd_tvla)

    s = sub.add_parser("attack", help="correlation power analysis")
    asub = s.add_subparsers(dest="mode", required=True)
    for mode in ("cpa", "hocpa"):
        a = asub.add_parser(mode, parents=[common])
        a.add_argument("--in", dest="input", required=True)
        a.add_argument("--space", choices=["int8", "bf16"])
        a.add_argument("--lo", type=float, default=1e-10)
        a.add_argument("--hi", type=float, default=1.0)
        a.add_argument("--positive-only", action="store_true")
        a.add_argument("--known-prefix", help="JSON with known weights, or 'planted'")
        a.add_argument("--target-index", type=int, help="0-based depth index of the attacked weight")
        a.add_argument("--fixed-s2", type=float)
        a.add_argument("--n-parallel", type=int)
        a.add_argument("--slot", type=int, default=0, help="input record (site) used for predictions")
        a.add_argument("--window", help="sample window START:STOP for peaks")
        a.add_argument("--step", type=int, default=100)
        a.add_argument("--truth", help="true weight value, 'none', default planted")
        if mode == "hocpa":
            a.add_argument("--sites", required=True, help="s1,s2[,s3]")
            a.add_argument("--slots", help="input record per site (default 0,1,...)")
            a.add_argument("--preprocess", choices=list(higher_order.PREPROCESSORS), default="squared_sum")
        a.set_defaults(func=cmd_attack)

    s = sub.add_parser("rank", parents=[common], help="key rank from corr.csv")
    s.add_argument("--corr", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--window")
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("tokens", parents=[common], help="count forward passes in an envelope")
    s.add_argument("--in", dest="input", required=True, help="envelope CSV or trace file")
    s.add_argument("--row", type=int, default=0)
    s.add_argument("--threshold", type=float, required=True)
    s.add_argument("--min-gap", type=int, default=1)
    s.set_defaults(func=cmd_tokens)

    s = sub.add_parser("batch", parents=[common], help="active duration vs batch size")
    s.add_argument("inputs", nargs="+", metavar="BATCH=PATH")
    s.add_argument("--threshold", type=float, required=True)
    s.add_argument("--min-gap", type=int, default=1)
    s.set_defaults(func=cmd_batch)

    s = sub.add_parser("quant", parents=[common], help="quantization leakage report")
    s.add_argument("--weights", required=True)
    s.add_argument("--bits", type=int, default=8)
    s.add_argument("--block-size", type=int)
    s.add_argument("--convention", choices=["full", "symmetric"], default="full")
    s.add_argument("--out")
    s.set_defaults(func=cmd_quant)

    s = sub.add_parser("field-boundary", parents=[common], help="near/far-field boundary 2 D^2 / lambda")
    s.add_argument("--d-m", type=float, required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--lambda-m", type=float)
    g.add_argument("--freq-hz", type=float)
    s.set_defaults(func=cmd_field_boundary)

    s = sub.add_parser("plot", parents=[common], help="render a CSV artifact as SVG")
    s.add_argument("--csv", required=True)
    s.add_argument("--kind", choices=sorted(plot.SCHEMAS), required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("replay", help="re-run a command from its run.json")
    s.add_argument("run")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = argv
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tcleak: error: {exc}", file=sys.stderr)
        return 2
    except (TcleakError, ValueError, KeyError) as exc:
        print(f"tcleak: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"tcleak: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
