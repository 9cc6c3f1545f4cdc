import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcleak import cpa, kernel, synth, traceio
from tcleak.errors import BadRange, InsufficientKnowledge, TruthNotInSpace, UnknownBaseline

BF16_VALUES = [struct.unpack("<f", struct.pack("<I", p << 16))[0] for p in range(1 << 16)]


def two_pass(h, y):
    hc = h - h.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (hc @ yc) / np.sqrt(np.outer((hc * hc).sum(1), (yc * yc).sum(0)))


# --- candidate spaces


def test_int8_space():
    s = cpa.int8_space()
    assert len(s) == 256 and len(set(s.values.tolist())) == 256
    with pytest.raises(TruthNotInSpace):
        s.index_of(128)


def test_enumerate_examples():
    assert len(cpa.enumerate_bf16(1.0, 1.0)) == 0
    half = cpa.enumerate_bf16(0.5, 1.0, include_negative=False)
    assert len(half) == 127  # 0.5 itself is excluded by the strict bound
    assert len(cpa.enumerate_bf16(0.4999, 1.0, include_negative=False)) == 128
    assert set(((half.values >> 7) & 0xFF).tolist()) == {126}
    with pytest.raises(BadRange):
        cpa.enumerate_bf16(1.0, 0.5)
    with pytest.raises(BadRange):
        cpa.enumerate_bf16(-1.0, 0.5)


@given(st.floats(0, 1e39, allow_nan=False), st.floats(0, 1e39, allow_nan=False), st.booleans())
@settings(max_examples=30, deadline=None)
def test_enumerate_equals_bruteforce(a, b, neg):
    lo, hi = min(a, b), max(a, b)
    want = {p for p, v in enumerate(BF16_VALUES) if math.isfinite(v) and lo < abs(v) < hi and (neg or p < 0x8000)}
    got = cpa.enumerate_bf16(lo, hi, neg).values.astype(int).tolist()
    assert len(got) == len(set(got)) and set(got) == want


# --- predictors


def test_predict_imma_examples():
    assert not cpa.predict_imma(np.arange(-128, 128), np.zeros((3, 16))).any()
    assert cpa.predict_imma([3], [[5]])[0, 0] == 4


def test_imma_model_baseline():
    tiles = np.zeros((4, 16, 16), np.int8)
    tiles[:, :, 0] = 1
    tiles[:, :, 2] = 2
    with pytest.raises(UnknownBaseline):
        cpa.ImmaModel().predict([1], tiles)
    p = cpa.ImmaModel(known_weights={2: 5}).predict(np.array([1]), tiles)
    # baseline 10, after 11: HD(10, 11) = 1 per row
    assert p.tolist() == [[16.0] * 4]


def test_hmma_modes():
    with pytest.raises(InsufficientKnowledge):
        cpa.HmmaModel(known_weights={0: 1}).mode
    assert cpa.HmmaModel(fixed_s2=0.5).mode == "fixed_s2"
    assert cpa.HmmaModel(target_index=3, known_weights={i: 0 for i in range(8)}).mode == "sequential"


def test_hmma_sequential_matches_kernel():
    rng = np.random.default_rng(0)
    w = kernel.f32_to_bf16(rng.normal(0, 0.1, 8).astype(np.float32))
    tiles = kernel.f32_to_bf16(rng.normal(size=(20, 16, 8)).astype(np.float32))
    model = cpa.HmmaModel(target_index=4, known_weights={i: int(w[i]) for i in range(8) if i != 4}, n_parallel=1)
    pred = model.predict(np.array([w[4]]), tiles)[0]
    want = [kernel.hmma_dot(kernel.HmmaState(w, tiles[t, 0])).leakage.hd for t in range(20)]
    assert pred.tolist() == want


def test_hmma_fixed_s2_prediction():
    rng = np.random.default_rng(1)
    x = kernel.f32_to_bf16(rng.normal(size=(10, 1)).astype(np.float32))
    c = kernel.f32_to_bf16(np.float32(0.75))
    s2 = np.float32(0.3)
    pred = cpa.predict_hmma([c], x, s2)[0]
    s = s2 + np.float32(0.75) * kernel.bf16_to_f32(x[:, 0])
    assert pred.tolist() == kernel.hw(kernel.f32_bits(s)).tolist()


def test_hmma_zero_target_input_is_excluded():
    rng = np.random.default_rng(2)
    tiles = kernel.f32_to_bf16(rng.normal(size=(30, 16, 8)).astype(np.float32))
    tiles[:, :, 7] = 0
    space = cpa.enumerate_bf16(0.01, 1.0)
    model = cpa.HmmaModel(fixed_s2=0.0)
    h = model.predict(space.values, tiles)
    res = cpa.correlate(h, rng.normal(size=(30, 4)))
    assert res.excluded_candidates.all() and np.isnan(res.corr).all()


# --- correlation


def test_streaming_equals_two_pass_in_chunks():
    rng = np.random.default_rng(3)
    h = rng.integers(0, 300, size=(40, 1000)).astype(float)
    y = rng.normal(1e4, 3.0, size=(1000, 30))
    acc = cpa.CorrelationAccumulator()
    for a in range(0, 1000, 137):
        acc.update(h[:, a:a + 137], y[a:a + 137])
    assert np.max(np.abs(acc.result().corr - two_pass(h, y))) < 1e-9


def test_self_correlation_is_one():
    rng = np.random.default_rng(4)
    h = rng.normal(size=(5, 200))
    r = cpa.correlate(h, h.T).corr
    assert np.allclose(np.diag(r), 1.0, atol=1e-12)


@given(st.floats(0.01, 1e3), st.floats(-1e4, 1e4), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_affine_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    h = rng.integers(0, 100, size=(8, 300)).astype(float)
    y = rng.normal(size=(300, 6))
    r1 = cpa.correlate(h, y).corr
    r2 = cpa.correlate(h, a * y + b).corr
    assert np.max(np.abs(r1 - r2)) < 1e-12 * max(1.0, abs(b) / a)
    assert np.all(np.abs(r1) <= 1.0)


def test_zero_variance_sample_excluded():
    y = np.zeros((50, 2))
    y[:, 1] = np.arange(50)
    res = cpa.correlate(np.arange(50.0)[None, :], y)
    assert res.excluded_samples.tolist() == [True, False]
    assert np.isnan(res.corr[0, 0]) and res.corr[0, 1] == pytest.approx(1.0)


# --- rank


def _result(peaks):
    corr = np.array(peaks, dtype=float)[:, None]
    return cpa.CpaResult(corr, 10, np.isnan(corr[:, 0]), np.zeros(1, bool))


def test_key_rank_examples():
    assert cpa.key_rank(_result([0.9, 0.1, 0.2]), 0) == 0
    assert cpa.key_rank(_result([0.1, 0.5, 0.2, 0.3]), 0) == 3
    assert cpa.key_rank(_result([0.5, -0.5, 0.5]), 0) == 0  # ties do not count
    assert cpa.key_rank(_result([np.nan, 0.01]), 0) == 1  # excluded ranks last
    with pytest.raises(TruthNotInSpace):
        cpa.key_rank(_result([0.1]), 3)


def test_key_rank_window():
    corr = np.array([[0.9, 0.1], [0.2, 0.5]])
    res = cpa.CpaResult(corr, 1, np.zeros(2, bool), np.zeros(2, bool))
    assert cpa.key_rank(res, 1) == 1
    assert cpa.key_rank(res, 1, window=(1, 2)) == 0


def test_rank_curve_traces_to_rank0():
    curve = cpa.RankCurve([(10, 5), (20, 0), (30, 2), (40, 0), (50, 0)])
    assert curve.traces_to_rank0() == 40 and curve.final_rank == 0
    assert cpa.RankCurve([(10, 1)]).traces_to_rank0() is None


def test_noiseless_attack_recovers_weight():
    sc = synth.KernelScenario(rng_seed=11, accumulator_init=99)
    ts, meta = synth.synthesize(sc, 64)
    res = cpa.attack(ts, meta, cpa.int8_space(), cpa.ImmaModel(accumulator_init=99), truth="planted", step=16)
    assert int(cpa.int8_space().values[res.result.best()]) == sc.truth
    i = cpa.int8_space().index_of(sc.truth)
    assert res.result.corr[i, 32] == pytest.approx(1.0, abs=1e-12)
    assert res.curve.final_rank == 0


def test_noiseless_hmma_attack():
    sc = synth.KernelScenario(kind="hmma", input_mode="uniform", target_row=7, rng_seed=12)
    ts, meta = synth.synthesize(sc, 64)
    col = sc.weights[:, 0]
    model = cpa.HmmaModel(target_index=7, known_weights={i: int(col[i]) for i in range(7)})
    space = cpa.enumerate_bf16(1e-10, 1.0)
    res = cpa.cpa(ts, meta, space, model)
    i = space.index_of(int(col[7]))
    assert res.corr[i, 32] == pytest.approx(1.0, abs=1e-12)
    assert cpa.key_rank(res, i) == 0


def test_result_independent_of_chunking():
    sc = synth.KernelScenario(rng_seed=13, noise_sigma=5.0)
    ts, meta = synth.synthesize(sc, 700)
    model = cpa.ImmaModel()
    a = cpa.attack(ts, meta, cpa.int8_space(), model, chunk=700).result.corr
    b = cpa.attack(ts, meta, cpa.int8_space(), model, chunk=64).result.corr
    assert np.allclose(a, b, rtol=0, atol=1e-12, equal_nan=True)


def test_more_traces_do_not_hurt_on_average():
    ranks_small, ranks_big = [], []
    for seed in range(6):
        sc = synth.KernelScenario(rng_seed=seed, accumulator_init=5000 + seed)
        sc = sc.replace(noise_sigma=4 * float(synth.warp_power_stats(sc)[1][0]))
        ts, meta = synth.synthesize(sc, 400)
        model = cpa.ImmaModel(accumulator_init=sc.accumulator_init)
        res = cpa.attack(ts, meta, cpa.int8_space(), model, step=200, truth="planted", window=(32, 33))
        ranks_small.append(res.curve.checkpoints[0][1])
        ranks_big.append(res.curve.checkpoints[1][1])
    assert np.mean(ranks_big) <= np.mean(ranks_small)


def test_planted_truth_reads_metadata():
    sc = synth.KernelScenario(rng_seed=1, target_row=2, sites=[synth.WarpSite(0, 10, weight_column=3)])
    _, meta = synth.synthesize(sc, 4)
    assert cpa.planted_truth(meta) == int(sc.weights[2, 3])
    tsm = traceio.TraceMeta(4)
    with pytest.raises(ValueError):
        cpa.attack(traceio.TraceSet(np.zeros((4, 2))), tsm, cpa.int8_space(), cpa.ImmaModel())
