import numpy as np
import pytest
from scipy.stats import spearmanr

from tokenquant.attribution import (
    BASELINE_QUANTIZED,
    BASELINE_ZERO,
    attribution_baseline,
    completeness_check,
    distortion_error,
    integrated_gradients,
    leave_one_out_sensitivity,
    qig,
)
from tokenquant.instances import W3A16, W4A8, mlp_instance, one_sided_linear_instance, outlier_instance
from tokenquant.quantizers import QuantConfig, activation_config, fake_quantize
from tokenquant.reference import naive_distortion
from tokenquant.toyblock import BlockModel, DistortionObjective, QuantizedExecution, block_forward, block_forward_quantized


class Fn:
    """Objective from explicit value / gradient callables."""

    def __init__(self, value, grad):
        self.value = value
        self.grad = grad


def test_distortion_worked_example():
    res = distortion_error([[1.0, 0.0], [2.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(res.per_token, [1.5, 0.5])
    assert res.scalar == 1.0


def test_distortion_matches_naive():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 5, 7))
    res = distortion_error(a, b)
    per_tok, scalar = naive_distortion(a.tolist(), b.tolist())
    np.testing.assert_allclose(res.per_token, per_tok, rtol=1e-14)
    assert res.scalar == pytest.approx(scalar, rel=1e-14)


def test_distortion_shape_mismatch():
    with pytest.raises(ValueError):
        distortion_error(np.zeros((2, 3)), np.zeros((3, 2)))


def test_ig_zero_path():
    x = np.ones((2, 3))
    res = integrated_gradients(Fn(None, lambda z: np.ones_like(z)), x, x, steps=4)
    assert np.all(res.per_element == 0)


def test_ig_linear_exact_one_step():
    rng = np.random.default_rng(1)
    c = rng.standard_normal((3, 4))
    x, base = rng.standard_normal((2, 3, 4))
    res = integrated_gradients(Fn(None, lambda z: c), x, base, steps=1)
    np.testing.assert_allclose(res.per_element, c * (x - base), rtol=1e-15)
    np.testing.assert_allclose(res.per_token_scores, (c * (x - base)).sum(axis=0), rtol=1e-14)


def test_ig_quadratic_completeness():
    # midpoint rule integrates a linear gradient exactly
    rng = np.random.default_rng(2)
    x, base = rng.standard_normal((2, 3, 5))
    f = lambda z: 0.5 * float(np.sum(z * z))
    res = integrated_gradients(Fn(f, lambda z: z), x, base, steps=32)
    assert completeness_check(res, f(x), f(base)) <= 1e-12


def test_ig_cubic_converges():
    rng = np.random.default_rng(3)
    x, base = rng.standard_normal((2, 2, 3))
    f = lambda z: float(np.sum(z**3)) / 3
    gaps = [completeness_check(integrated_gradients(Fn(f, lambda z: z * z), x, base, n), f(x), f(base)) for n in (4, 32)]
    assert gaps[1] <= 1e-3 and gaps[1] < gaps[0]


def test_ig_rejects_bad_input():
    g = Fn(None, lambda z: z)
    with pytest.raises(ValueError):
        integrated_gradients(g, np.ones((2, 2)), np.ones((2, 2)), steps=0)
    with pytest.raises(ValueError):
        integrated_gradients(g, np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(FloatingPointError):
        integrated_gradients(Fn(None, lambda z: z * np.nan), np.ones((2, 2)), np.zeros((2, 2)))


def test_baseline_rule():
    x = np.random.default_rng(4).standard_normal((4, 3))
    base, kind = attribution_baseline(x, W4A8)
    assert kind == BASELINE_QUANTIZED
    np.testing.assert_array_equal(base, fake_quantize(x, activation_config(8)))
    base, kind = attribution_baseline(x, W3A16)
    assert kind == BASELINE_ZERO and np.all(base == 0)


def test_qig_lossless_is_zero():
    model, x = mlp_instance(0, d=4, T=5)
    res = qig(model, QuantizedExecution(None), x, steps=4)
    assert np.all(res.per_token_scores == 0)
    assert res.residual == 0


def test_qig_exact_completeness_one_sided():
    for seed in range(5):
        model, exec_, x = one_sided_linear_instance(seed, act_cfg=activation_config(8))
        res = qig(model, exec_, x, steps=1)
        assert res.baseline_kind == BASELINE_QUANTIZED
        assert res.residual <= 1e-10


def test_qig_exact_completeness_weight_only():
    model, exec_, x = one_sided_linear_instance(7)
    res = qig(model, exec_, x, steps=1)
    assert res.baseline_kind == BASELINE_ZERO
    obj = DistortionObjective(model, exec_)
    assert abs(res.per_token_scores.sum() - obj.value(x)) <= 1e-10


def test_qig_residual_recomputed():
    model, x = mlp_instance(2)
    res = qig(model, W4A8, x, steps=16)
    obj = DistortionObjective(model, W4A8)
    L = obj.value(x) - obj.value(fake_quantize(x, W4A8.act_cfg))
    assert res.residual == pytest.approx(abs(res.per_token_scores.sum() - L), abs=1e-15)


def test_qig_aggregation_consistent():
    model, x = mlp_instance(3, d=4, T=6)
    res = qig(model, W3A16, x, steps=8)
    np.testing.assert_allclose(res.per_token_scores, res.per_element.sum(axis=0), rtol=1e-14)
    assert res.per_element.shape == x.shape


def test_qig_batched_is_average():
    model, x = mlp_instance(4, d=4, T=5)
    x2 = x[::-1] * 0.5
    both = qig(model, W4A8, np.stack([x, x2]), steps=8)
    one, two = qig(model, W4A8, x, steps=8), qig(model, W4A8, x2, steps=8)
    np.testing.assert_allclose(both.per_token_scores, (one.per_token_scores + two.per_token_scores) / 2, atol=1e-15)


def test_objective_is_mean_abs_gap():
    model, x = mlp_instance(5, d=4, T=6)
    obj = DistortionObjective(model, W4A8)
    expected = distortion_error(block_forward(model, x), block_forward_quantized(model, x, QuantizedExecution(W4A8.weight_cfg)))
    assert obj.value(x) == pytest.approx(expected.scalar, rel=1e-14)


def test_loo_identical_tokens():
    model, x = mlp_instance(6, d=4, T=1)
    x = np.repeat(x, 4, axis=1)
    loo = leave_one_out_sensitivity(model, W3A16, x)
    assert np.ptp(loo) <= 1e-15 * max(loo.max(), 1)


def test_loo_outlier_dominates():
    model, x, j = outlier_instance(0)
    loo = leave_one_out_sensitivity(model, W4A8, x)
    scores = np.abs(qig(model, W4A8, x).per_token_scores)
    assert int(np.argmax(loo)) == j == int(np.argmax(scores))
    assert spearmanr(scores, loo)[0] >= 0.8


def test_attention_baseline_uses_token_mixing():
    rng = np.random.default_rng(8)
    model = BlockModel.random("attention", 4, rng=rng)
    x = rng.standard_normal((4, 5))
    res = qig(model, QuantizedExecution(QuantConfig(3, "symmetric", "per-channel"), activation_config(4)), x, steps=64)
    obj = DistortionObjective(model, QuantizedExecution(QuantConfig(3, "symmetric", "per-channel")))
    L = obj.value(x) - obj.value(fake_quantize(x, activation_config(4)))
    assert res.residual <= 0.05 * abs(L) + 1e-12
