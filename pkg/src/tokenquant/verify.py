"""Seeded property checks run by ``tokenquant verify``.

Every check reports a measured value and a tolerance and passes iff
``measured <= tolerance * tol_scale``.  Results are deterministic for a given
seed list; wall-clock timings are kept separately.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import spearmanr

from . import instances
from .attribution import leave_one_out_sensitivity, qig
from .equalization import search_scales
from .gptq import gptq_quantize, rtn_quantize, weighted_errors, weighted_hessian
from .io import rng_for
from .quantizers import (
    QuantConfig,
    activation_config,
    dequantize,
    fake_quantize,
    quantize,
    weight_channel_config,
    weight_only_config,
)
from .reference import exhaustive_search, nearest_code, reference_gptq
from .toyblock import DistortionObjective, grad_input_fd
from .weighting import build_sensitivity

EPS = np.finfo(np.float64).eps


@dataclass
class Check:
    name: str
    seed: int
    measured: float
    tolerance: float
    passed: bool = False


def kink_mask(objective: DistortionObjective, x, threshold: float = 1e-6) -> np.ndarray:
    """True for input coordinates whose token feeds a residual with ``|r| < threshold``.

    Token-separable blocks (linear, mlp) only flag the token's own column;
    attention mixes tokens, so any near-zero residual flags every coordinate.
    """
    r = objective.residual(x)
    near = np.any(np.abs(r) < threshold, axis=0)
    if objective.model.kind == "attention":
        near = np.full_like(near, near.any())
    return np.broadcast_to(near[None, :], x.shape)


def gradient_discrepancy(objective: DistortionObjective, x, epsilon: float = 1e-4) -> float:
    """Max-norm relative gap between analytic and central-difference gradients."""
    g = objective.grad(x)
    g_fd = grad_input_fd(objective.value, x, epsilon)
    keep = ~kink_mask(objective, x)
    if not keep.any():
        return 0.0
    scale = np.max(np.abs(g_fd[keep]))
    if scale == 0:
        return float(np.max(np.abs(g[keep])))
    return float(np.max(np.abs(g[keep] - g_fd[keep])) / scale)


def _code_range_violations(seed: int) -> float:
    rng = rng_for(seed, "verify-code-range")
    bad = 0
    for bits in range(2, 9):
        t = rng.standard_normal((6, 10)) * rng.uniform(0.01, 10)
        for cfg in (
            QuantConfig(bits),
            activation_config(bits),
            weight_channel_config(bits),
            weight_only_config(bits, group_size=4),
        ):
            codes = quantize(t, cfg).codes
            bad += int(np.sum((codes < cfg.qmin) | (codes > cfg.qmax)))
    return float(bad)


def _half_interval_ratio(seed: int, n: int = 200) -> float:
    rng = rng_for(seed, "verify-half-interval")
    worst = 0.0
    for _ in range(n):
        bits = int(rng.integers(2, 9))
        t = rng.standard_normal(int(rng.integers(1, 40))) * rng.uniform(1e-3, 1e3)
        cfg = QuantConfig(bits)
        q = quantize(t, cfg)
        amax = np.max(np.abs(t))
        if amax == 0:
            continue
        bound = float(q.scales) / 2 + 4 * EPS * amax
        worst = max(worst, float(np.max(np.abs(t - dequantize(q)))) / bound)
    return worst


def _scalar_oracle_mismatches(seed: int, n: int = 1000) -> float:
    rng = rng_for(seed, "verify-scalar-oracle")
    cfg = QuantConfig(3)
    t = rng.uniform(-1, 1, n) * rng.uniform(0.1, 10)
    q = quantize(t, cfg)
    codes = range(cfg.qmin, cfg.qmax + 1)
    s = float(q.scales)
    return float(sum(int(q.codes[i]) != nearest_code(t[i], s, codes) for i in range(n)))


def run_checks(seeds=(0, 1, 2, 3, 4), tol_scale: float = 1.0) -> tuple[list[Check], dict]:
    checks: list[Check] = []
    timings: dict = {}

    def record(name, seed, measured, tolerance):
        checks.append(Check(name, seed, float(measured), float(tolerance)))

    for seed in seeds:
        t0 = time.perf_counter()
        record("quantizer.code_range", seed, _code_range_violations(seed), 0)
        record("quantizer.half_interval", seed, _half_interval_ratio(seed), 1.0)
        record("quantizer.scalar_oracle", seed, _scalar_oracle_mismatches(seed), 0)
        timings.setdefault("quantizer", 0.0)
        timings["quantizer"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        model, x = instances.mlp_instance(seed, d=6, T=8)
        obj = DistortionObjective(model, instances.W4A8)
        record("gradient.finite_difference", seed, gradient_discrepancy(obj, x), 1e-5)

        model, exec_, x = instances.one_sided_linear_instance(seed, act_cfg=activation_config(8))
        res = qig(model, exec_, x, steps=1)
        record("completeness.exact", seed, res.residual, 1e-10)

        model, x = instances.mlp_instance(seed, d=8, T=16)
        obj = DistortionObjective(model, instances.W4A8)
        base = fake_quantize(x, instances.W4A8.act_cfg)
        delta = abs(obj.value(x) - obj.value(base))
        r8 = qig(model, instances.W4A8, x, steps=8).residual
        r256 = qig(model, instances.W4A8, x, steps=256).residual
        record("completeness.relative_256", seed, r256 / delta if delta > 0 else 0.0, 1e-3)
        record("completeness.monotone_8_to_256", seed, r256 - r8, 0)

        model, x, j = instances.outlier_instance(seed)
        scores = np.abs(qig(model, instances.W4A8, x).per_token_scores)
        loo = leave_one_out_sensitivity(model, instances.W4A8, x)
        record("sensitivity.spearman_deficit", seed, 0.8 - spearmanr(scores, loo)[0], 0)
        timings.setdefault("attribution", 0.0)
        timings["attribution"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        W, X, lam = instances.cwe_instance(seed)
        wcfg = weight_only_config(3)
        found = search_scales(W, X, lam, wcfg)
        alpha, err, _ = exhaustive_search(W, X, lam, wcfg)
        record("cwe.oracle_alpha_mismatch", seed, float(found.alpha != alpha), 0)
        record("cwe.oracle_error_rel", seed, abs(found.weighted_error - err) / max(err, 1e-300), 1e-9)
        record("cwe.identity_dominance", seed, found.weighted_error - found.trace[-1][1], 0)

        W, X, raw = instances.gptq_instance(seed)
        T = X.shape[1]
        wcfg = weight_only_config(3)
        uniform = np.full(T, 1.0 / T)
        qt, _ = gptq_quantize(W, weighted_hessian(X, uniform), wcfg)
        H_ref = X @ X.T / T
        H_ref[np.diag_indices_from(H_ref)] += 0.01 * np.mean(np.diag(H_ref))
        record("gptq.uniform_code_mismatch", seed, np.sum(qt.codes != reference_gptq(W, H_ref, wcfg)), 0)
        lam = build_sensitivity(raw).lam
        qt, _ = gptq_quantize(W, weighted_hessian(X, lam), wcfg)
        g_err = np.dot(lam, weighted_errors(W, dequantize(qt), X))
        r_err = np.dot(lam, weighted_errors(W, dequantize(rtn_quantize(W, wcfg)), X))
        record("gptq.rtn_dominance", seed, g_err - r_err, 0)
        record("weighting.lambda_sum", seed, abs(lam.sum() - 1.0), 1e-12)
        timings.setdefault("quantization", 0.0)
        timings["quantization"] += time.perf_counter() - t0

    for c in checks:
        c.passed = bool(c.measured <= c.tolerance * tol_scale)
    return checks, timings


def summary(checks: list[Check], seeds, tol_scale: float) -> dict:
    return {
        "seeds": [int(s) for s in seeds],
        "tol_scale": tol_scale,
        "passed": all(c.passed for c in checks),
        "n_checks": len(checks),
        "n_failed": sum(not c.passed for c in checks),
        "checks": [asdict(c) for c in checks],
    }
