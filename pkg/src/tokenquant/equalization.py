"""Token-weighted channel-wise equalization.

For a linear sub-layer ``W`` (m x d) with calibration input ``X`` (d x T) the
search picks per-channel scales ``E`` minimizing

    sum_i lam_i * || Q_W(W * E) Q_X(E^-1 * X_i) - W X_i ||^2

over the power family ``E_c = max_t|X_ct|^a / max_r|W_rc|^(1-a)`` on a
uniform ``a`` grid, plus the identity ``E = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quantizers import QuantConfig, fake_quantize, quantize
from .toyblock import BlockModel, QuantizedBlock, sublayer_inputs

SCALE_FLOOR = 1e-5
DEFAULT_GRID_SIZE = 21
# errors within this fraction of the weighted output energy count as ties
TIE_RTOL = 1e-12


@dataclass
class EqualizationResult:
    scales: np.ndarray
    weighted_error: float
    alpha: float | None
    trace: list = field(default_factory=list)
    lambda_used: np.ndarray | None = None

    @property
    def is_identity(self) -> bool:
        return self.alpha is None


def _check_scales(E, d):
    E = np.asarray(E, dtype=np.float64)
    if E.shape != (d,):
        raise ValueError(f"expected {d} scales, got shape {E.shape}")
    if not np.all(np.isfinite(E)) or np.any(E <= 0):
        raise ValueError("scales must be finite and strictly positive")
    return E


def token_errors(W, X, E, wcfg: QuantConfig | None, acfg: QuantConfig | None = None) -> np.ndarray:
    """Squared reconstruction error of every token column under scales ``E``."""
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if W.ndim != 2 or X.ndim != 2 or W.shape[1] != X.shape[0]:
        raise ValueError(f"inconsistent shapes W{W.shape} X{X.shape}")
    E = _check_scales(E, W.shape[1])
    wq = fake_quantize(W * E[None, :], wcfg)
    xq = fake_quantize(X / E[:, None], acfg)
    r = wq @ xq - W @ X
    return np.sum(r * r, axis=0)


def _weighted(errors, lam):
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != errors.shape:
        raise ValueError(f"lambda has shape {lam.shape}, expected {errors.shape}")
    return float(np.dot(lam, errors))


def weighted_objective_wa(W, X, E, lam, wcfg, acfg) -> float:
    return _weighted(token_errors(W, X, E, wcfg, acfg), lam)


def weighted_objective_weight_only(W, X, E, lam, wcfg) -> float:
    return _weighted(token_errors(W, X, E, wcfg, None), lam)


def candidate_scales(W, X, alpha: float) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    x_max = np.max(np.abs(X), axis=1)
    w_max = np.maximum(np.max(np.abs(W), axis=0), SCALE_FLOOR)
    E = np.maximum(x_max**alpha / w_max ** (1.0 - alpha), SCALE_FLOOR)
    E = E / np.sqrt(E.max() * E.min())
    E = np.maximum(E, SCALE_FLOOR)
    # dead activation channels carry no signal; leave them unscaled
    E[x_max == 0] = 1.0
    return E


def search_scales(
    W,
    X,
    lam,
    wcfg: QuantConfig | None,
    acfg: QuantConfig | None = None,
    grid_size: int = DEFAULT_GRID_SIZE,
) -> EqualizationResult:
    """Grid search over the power family; the identity is always a candidate.

    Among grid candidates the smaller ``alpha`` wins ties; the identity wins
    any tie with the best grid candidate.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    ref = float(np.dot(lam, np.sum((W @ X) ** 2, axis=0)))
    tol = TIE_RTOL * ref if ref > 0 else 0.0

    trace = []
    best = None
    for k in range(grid_size):
        alpha = k / (grid_size - 1)
        E = candidate_scales(W, X, alpha)
        err = _weighted(token_errors(W, X, E, wcfg, acfg), lam)
        trace.append((alpha, err))
        if best is None or err < best[2] - tol:
            best = (alpha, E, err)

    ones = np.ones(W.shape[1])
    err_id = _weighted(token_errors(W, X, ones, wcfg, acfg), lam)
    trace.append((None, err_id))
    if err_id <= best[2] + tol:
        best = (None, ones, err_id)

    alpha, E, err = best
    return EqualizationResult(scales=E, weighted_error=err, alpha=alpha, trace=trace, lambda_used=lam)


def equalize_and_quantize(
    model: BlockModel,
    X_calib,
    lam,
    wcfg: QuantConfig,
    acfg: QuantConfig | None = None,
    grid_size: int = DEFAULT_GRID_SIZE,
) -> tuple[QuantizedBlock, dict]:
    """Search scales for every linear sub-layer and store the quantized block.

    Each sub-layer is calibrated on its full-precision input; the same token
    weights ``lam`` are reused for all sub-layers.
    """
    inputs = sublayer_inputs(model, X_calib)
    if inputs[model.layer_names[0]].ndim != 2:
        raise ValueError("calibration input must be a single d x T matrix")
    weights, scales, results = {}, {}, {}
    for name in model.layer_names:
        W = model.weights[name]
        res = search_scales(W, inputs[name], lam, wcfg, acfg, grid_size)
        results[name] = res
        weights[name] = quantize(W * res.scales[None, :], wcfg)
        scales[name] = res.scales
    return QuantizedBlock(model.kind, weights, scales, acfg), results
