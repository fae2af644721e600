"""GPTQ with a token-weighted Hessian ``H' = sum_i lam_i X_i X_i^T``.

Columns are quantized in natural order without lazy batching.  Quantization
parameters (group scales / zero-points) are computed once from the
unmodified weight matrix; error compensation then only changes which code
each later column rounds to.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .quantizers import (
    SYMMETRIC,
    QuantConfig,
    QuantizedTensor,
    asymmetric_params,
    decode,
    dequantize,
    encode,
    expand_params,
    quantize,
    symmetric_params,
)

logger = logging.getLogger(__name__)

DEFAULT_DAMPING = 0.01


@dataclass
class WeightedHessian:
    matrix: np.ndarray
    damping: float
    lam: np.ndarray
    undamped: np.ndarray


def weighted_hessian(X, lam, damping_frac: float = DEFAULT_DAMPING) -> WeightedHessian:
    """Token-weighted second moment of the layer input plus diagonal damping.

    Raises ``np.linalg.LinAlgError`` when the damped matrix is still not
    positive definite; retry with a larger ``damping_frac``.
    """
    X = np.asarray(X, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if X.ndim != 2 or lam.shape != (X.shape[1],):
        raise ValueError(f"need X (d x T) and lambda of length T, got {X.shape} and {lam.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("calibration activations must be finite")
    H0 = (X * lam[None, :]) @ X.T
    H0 = 0.5 * (H0 + H0.T)
    H = H0.copy()
    H[np.diag_indices_from(H)] += damping_frac * np.mean(np.diag(H0))
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"weighted Hessian is not positive definite after {damping_frac:g} damping"
        ) from exc
    return WeightedHessian(matrix=H, damping=damping_frac, lam=lam, undamped=H0)


def _inverse_cholesky_upper(H: np.ndarray) -> np.ndarray:
    L = scipy.linalg.cholesky(H, lower=True)
    Hinv = scipy.linalg.cho_solve((L, True), np.eye(len(H)))
    return scipy.linalg.cholesky(Hinv, lower=False)


def _static_params(W, wcfg: QuantConfig):
    if wcfg.mode == SYMMETRIC:
        return symmetric_params(W, wcfg), None, None
    return asymmetric_params(W, wcfg)


def rtn_quantize(W, wcfg: QuantConfig) -> QuantizedTensor:
    """Round-to-nearest baseline (no error compensation)."""
    return quantize(W, wcfg)


def weighted_errors(W, W_hat, X) -> np.ndarray:
    """Per-token squared output error ``||(W - W_hat) X_i||^2``."""
    R = (np.asarray(W) - np.asarray(W_hat)) @ np.asarray(X)
    return np.sum(R * R, axis=0)


def gptq_quantize(W, H: WeightedHessian, wcfg: QuantConfig, X=None) -> tuple[QuantizedTensor, dict]:
    W = np.array(W, dtype=np.float64)
    if W.ndim != 2 or H.matrix.shape != (W.shape[1], W.shape[1]):
        raise ValueError(f"Hessian shape {H.matrix.shape} does not match W{W.shape}")
    if wcfg.granularity == "per-token":
        raise ValueError("per-token granularity is an activation format")

    scales, zeros, constants = _static_params(W, wcfg)
    S = expand_params(scales, W.shape, wcfg)
    Z = None if zeros is None else expand_params(zeros, W.shape, wcfg)
    C = None if constants is None else expand_params(constants, W.shape, wcfg)
    U = _inverse_cholesky_upper(H.matrix)

    work = W.copy()
    codes = np.zeros(W.shape, dtype=np.int32)
    proxy_loss = 0.0
    d = W.shape[1]
    for j in range(d):
        w = work[:, j]
        z = None if Z is None else Z[:, j]
        codes[:, j] = encode(w, S[:, j], z, wcfg)
        q = decode(codes[:, j], S[:, j], z, None if C is None else C[:, j])
        err = (w - q) / U[j, j]
        proxy_loss += float(np.dot(err, err))
        if j + 1 < d:
            work[:, j + 1 :] -= np.outer(err, U[j, j + 1 :])

    qt = QuantizedTensor(
        codes=codes,
        scales=scales,
        config=wcfg,
        source_shape=W.shape,
        zero_points=zeros,
        constants=constants,
    )
    W_hat = dequantize(qt)
    delta = W - W_hat
    report = {
        "weighted_error": float(np.sum((delta @ H.undamped) * delta)),
        "proxy_loss": proxy_loss,
        "damping": H.damping,
    }
    if X is not None:
        rtn_hat = dequantize(rtn_quantize(W, wcfg))
        per_tok = weighted_errors(W, W_hat, X)
        rtn_tok = weighted_errors(W, rtn_hat, X)
        report.update(
            weighted_error=float(np.dot(H.lam, per_tok)),
            per_token_errors=per_tok.tolist(),
            unweighted_error=float(per_tok.sum()),
            rtn_weighted_error=float(np.dot(H.lam, rtn_tok)),
            rtn_per_token_errors=rtn_tok.tolist(),
            rtn_unweighted_error=float(rtn_tok.sum()),
        )
    logger.debug("gptq: weighted error %.6g", report["weighted_error"])
    return qt, report
