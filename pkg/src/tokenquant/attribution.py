"""Token attribution of the quantization distortion.

Integrated gradients are computed with the midpoint rule on ``steps`` nodes
``alpha_k = (k - 1/2) / steps``; per-token scores are column sums of the
element-wise attributions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .quantizers import fake_quantize
from .toyblock import BlockModel, DistortionObjective, QuantizedExecution

BASELINE_QUANTIZED = "quantized-input"
BASELINE_ZERO = "zero"

DEFAULT_IG_STEPS = 32


@dataclass
class Objective:
    """A scalar function of ``x`` together with its gradient."""

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]


@dataclass
class AttributionResult:
    per_token_scores: np.ndarray
    per_element: np.ndarray
    steps: int
    baseline_kind: str | None = None
    residual: float | None = None


@dataclass
class DistortionError:
    per_token: np.ndarray
    scalar: float


def distortion_error(y_fp, y_q) -> DistortionError:
    """Mean absolute output gap per token (over output channels, axis -2).

    Works on ``m x T`` or batched ``B x m x T`` outputs.
    """
    y_fp = np.asarray(y_fp, dtype=np.float64)
    y_q = np.asarray(y_q, dtype=np.float64)
    if y_fp.shape != y_q.shape:
        raise ValueError(f"shape mismatch: {y_fp.shape} vs {y_q.shape}")
    per_token = np.mean(np.abs(y_fp - y_q), axis=-2)
    return DistortionError(per_token=per_token, scalar=float(np.mean(per_token)))


def integrated_gradients(objective, x, baseline, steps: int = DEFAULT_IG_STEPS) -> AttributionResult:
    """Midpoint-rule integrated gradients of ``objective`` from ``baseline`` to ``x``.

    ``objective`` only needs a ``grad(x)`` method.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise ValueError("input and baseline shapes differ")
    delta = x - baseline
    total = np.zeros_like(x)
    for k in range(1, steps + 1):
        alpha = (k - 0.5) / steps
        g = objective.grad(baseline + alpha * delta)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at alpha={alpha}")
        total += g
    per_element = delta * (total / steps)
    return AttributionResult(
        per_token_scores=per_element.sum(axis=0),
        per_element=per_element,
        steps=steps,
    )


def completeness_check(result: AttributionResult, L_at_x: float, L_at_baseline: float) -> float:
    """Absolute gap between summed attributions and the objective's change."""
    return float(abs(np.sum(result.per_token_scores) - (L_at_x - L_at_baseline)))


def attribution_baseline(x, exec_: QuantizedExecution) -> tuple[np.ndarray, str]:
    """Fake-quantized input when activations are quantized, otherwise zeros."""
    x = np.asarray(x, dtype=np.float64)
    if exec_.act_cfg is not None:
        return fake_quantize(x, exec_.act_cfg), BASELINE_QUANTIZED
    return np.zeros_like(x), BASELINE_ZERO


def qig(
    model: BlockModel,
    exec_: QuantizedExecution,
    x,
    steps: int = DEFAULT_IG_STEPS,
) -> AttributionResult:
    """Quantization-aware integrated gradients of the block distortion.

    The attributed function is the mean absolute gap between the
    full-precision and quantized block outputs, differentiated as one
    function.  Batched inputs ``(B, d, T)`` are attributed per item and the
    results averaged over the batch.
    """
    x = np.asarray(x, dtype=np.float64)
    objective = DistortionObjective(model, exec_)
    items = x[None] if x.ndim == 2 else x
    if items.ndim != 3:
        raise ValueError("qig expects a d x T or B x d x T input")

    per_element = np.zeros(items.shape[1:])
    L_x = L_base = 0.0
    kind = None
    for item in items:
        base, kind = attribution_baseline(item, exec_)
        res = integrated_gradients(objective, item, base, steps)
        per_element += res.per_element
        L_x += objective.value(item)
        L_base += objective.value(base)
    n = len(items)
    per_element /= n
    result = AttributionResult(
        per_token_scores=per_element.sum(axis=0),
        per_element=per_element,
        steps=steps,
        baseline_kind=kind,
    )
    result.residual = completeness_check(result, L_x / n, L_base / n)
    return result


def leave_one_out_sensitivity(model: BlockModel, exec_: QuantizedExecution, x) -> np.ndarray:
    """Change in distortion when each token alone is reset to its baseline column.

    Costs ``T + 1`` objective evaluations per batch item.
    """
    x = np.asarray(x, dtype=np.float64)
    objective = DistortionObjective(model, exec_)
    items = x[None] if x.ndim == 2 else x
    scores = np.zeros(items.shape[-1])
    for item in items:
        base, _ = attribution_baseline(item, exec_)
        L0 = objective.value(item)
        for i in range(item.shape[-1]):
            probe = item.copy()
            probe[:, i] = base[:, i]
            scores[i] += abs(L0 - objective.value(probe))
    return scores / len(items)
