import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tcleak import quant
from tcleak.errors import AllZeroBlock

blocks_ = hnp.arrays(np.float64, st.integers(1, 64), elements=st.floats(-1e3, 1e3)).filter(lambda a: np.any(a != 0))


def test_scale_examples():
    assert quant.derive_scale([1.0, -0.5]) == 255.0
    assert quant.derive_scale([0.5, 0.1]) == 510.0
    assert quant.derive_scale([-51.0, 3.0]) == 5.0
    assert quant.derive_scale([1.0], convention="symmetric") == 127.0
    with pytest.raises(AllZeroBlock):
        quant.derive_scale([0.0, 0.0])
    with pytest.raises(AllZeroBlock):
        quant.derive_scale([])


@given(blocks_)
def test_extremum_exact_and_zero_maps_to_zero(w):
    s = quant.QuantScheme()
    codes, m = quant.quantize(w, s)
    i = int(np.abs(w).argmax())
    assert abs(codes[i]) == s.numerator
    assert quant.dequantize(codes[i], m, s) == w[i]
    assert np.all(codes[w == 0] == 0)
    assert np.all(np.abs(codes) <= s.numerator)


@given(blocks_, st.sampled_from([0.5, 2.0, 4.0, 0.125]))
def test_scale_covariance(w, c):
    s1 = quant.derive_scale(w)
    s2 = quant.derive_scale(c * w)
    assert s2 == pytest.approx(s1 / c, rel=1e-12)
    assert np.array_equal(quant.quantize(w, quant.QuantScheme())[0], quant.quantize(c * w, quant.QuantScheme())[0])


def test_round_half_away():
    s = quant.QuantScheme(bits=2)  # N = 3
    codes, _ = quant.quantize([3.0, 1.5, -1.5, 0.5], s)
    assert codes.tolist() == [3, 2, -2, 1]


def test_error_bound():
    rng = np.random.default_rng(0)
    w = rng.normal(size=1000)
    s = quant.QuantScheme()
    codes, m = quant.quantize(w, s)
    assert np.max(np.abs(quant.dequantize(codes, m, s) - w)) <= m / s.numerator / 2 + 1e-12


def test_pinned_counts():
    w = np.random.default_rng(1).normal(size=(64, 64))
    assert quant.leakage_report(w, quant.QuantScheme()).pinned_count == 1
    rep = quant.leakage_report(w, quant.QuantScheme(block_size=64))
    assert rep.pinned_count == 64 == quant.pinned_count(w.shape, quant.QuantScheme(block_size=64))
    flat = w.ravel()
    for b in rep.blocks:
        assert b.pinned_value == flat[b.pinned_index]
        assert b.unknown_weights == 63
    assert rep.remaining_bits == pytest.approx(64 * 63 * np.log2(511))
    assert quant.pinned_count((10,), quant.QuantScheme(block_size=3)) == 4


def test_tensor_roundtrip_shape():
    w = np.random.default_rng(2).normal(size=(5, 7))
    s = quant.QuantScheme(block_size=8)
    codes, maxes = quant.quantize_tensor(w, s)
    assert codes.shape == w.shape and len(maxes) == 5
    back = quant.dequantize_tensor(codes, maxes, s)
    assert np.max(np.abs(back - w)) <= maxes.max() / 255 / 2 + 1e-12


def test_scheme_validation():
    with pytest.raises(ValueError):
        quant.QuantScheme(bits=1)
    with pytest.raises(ValueError):
        quant.QuantScheme(block_size=0)
    with pytest.raises(ValueError):
        quant.QuantScheme(convention="asym")
