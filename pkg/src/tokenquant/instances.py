"""Seeded problem instances shared by the verification suite and the tests."""

from __future__ import annotations

import numpy as np

from .io import rng_for
from .quantizers import (
    QuantConfig,
    activation_config,
    fake_quantize,
    weight_channel_config,
    weight_only_config,
)
from .toyblock import LINEAR, BlockModel, QuantizedExecution

W4A8 = QuantizedExecution(weight_channel_config(4), activation_config(8))
W3A16 = QuantizedExecution(weight_only_config(3))


def random_input(rng, d: int, T: int) -> np.ndarray:
    return rng.standard_normal((d, T))


def inject_outlier(x, kind: str, index: int, scale: float) -> np.ndarray:
    """Scale one token column (``kind="token"``) or one channel row (``"channel"``)."""
    x = np.array(x, dtype=np.float64)
    if kind == "token":
        x[:, index] *= scale
    elif kind == "channel":
        x[index, :] *= scale
    else:
        raise ValueError(f"unknown outlier kind {kind!r}")
    return x


def mlp_instance(seed: int, d: int = 8, T: int = 16):
    rng = rng_for(seed, "mlp-instance")
    model = BlockModel.random("mlp", d, rng=rng)
    return model, random_input(rng, d, T)


def outlier_instance(seed: int, d: int = 8, T: int = 16, scale: float = 50.0, kind: str = "mlp"):
    """Block plus input whose token ``j`` is scaled by ``scale``; returns ``(model, x, j)``."""
    rng = rng_for(seed, f"outlier-{kind}")
    model = BlockModel.random(kind, d, rng=rng)
    x = random_input(rng, d, T)
    j = int(rng.integers(T))
    return model, inject_outlier(x, "token", j, scale), j


def one_sided_linear_instance(
    seed: int,
    d: int = 8,
    m: int = 4,
    T: int = 6,
    weight_cfg: QuantConfig | None = None,
    act_cfg: QuantConfig | None = None,
):
    """Linear block and input with ``(W - W_q) x_alpha > 0`` on the whole attribution path.

    Tokens are built as ``pinv(W - W_q) @ target`` with strictly positive
    targets, then redrawn until the quantized baseline keeps every residual
    positive too.  Needs ``m <= d``.
    """
    if m > d:
        raise ValueError("one-sided construction needs m <= d")
    weight_cfg = weight_cfg or weight_only_config(3)
    rng = rng_for(seed, "one-sided-linear")
    for _ in range(100):
        model = BlockModel(LINEAR, {"W": rng.standard_normal((m, d)) / np.sqrt(d)})
        W = model.weights["W"]
        D = W - fake_quantize(W, weight_cfg)
        if np.linalg.matrix_rank(D) < m:
            continue
        target = 1.0 + rng.random((m, T))
        x = np.linalg.pinv(D) @ target
        # a zero baseline scales the residual by alpha, so only x needs checking
        base_ok = act_cfg is None or np.all(D @ fake_quantize(x, act_cfg) > 0)
        if np.all(D @ x > 0) and base_ok:
            return model, QuantizedExecution(weight_cfg, act_cfg), x
    raise RuntimeError("could not build a one-sided instance")


def cwe_instance(seed: int, d: int = 4, m: int = 4, T: int = 3):
    """Small ``(W, X, lam)`` triple for exhaustive-search comparisons."""
    rng = rng_for(seed, "cwe-instance")
    W = rng.standard_normal((m, d))
    X = rng.standard_normal((d, T)) * rng.uniform(0.5, 20.0, size=(d, 1))
    lam = rng.random(T) + 0.05
    return W, X, lam / lam.sum()


def gptq_instance(seed: int, m: int = 16, d: int = 16, T: int = 64):
    rng = rng_for(seed, "gptq-instance")
    W = rng.standard_normal((m, d))
    X = rng.standard_normal((d, T))
    raw = rng.standard_normal(T) ** 3
    return W, X, raw
