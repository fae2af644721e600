"""Turn raw token attributions into importance coefficients.

Scores are made non-negative (absolute value), clamped to Tukey fences
``[Q1 - k*IQR, Q3 + k*IQR]`` and normalized to sum to one.  Quartiles use
linear interpolation between order statistics (numpy's default method).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_IQR_K = 1.5


@dataclass
class SensitivityVector:
    raw: np.ndarray
    magnitude: np.ndarray
    clipped: np.ndarray
    lam: np.ndarray
    iqr_multiplier: float = DEFAULT_IQR_K
    quartile_method: str = "linear"


def iqr_fences(scores, k: float = DEFAULT_IQR_K) -> tuple[float, float]:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot compute quartiles of an empty vector")
    q1, q3 = np.quantile(scores, [0.25, 0.75], method="linear")
    iqr = q3 - q1
    return float(q1 - k * iqr), float(q3 + k * iqr)


def iqr_clip(scores, k: float = DEFAULT_IQR_K) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError("iqr_clip expects a vector")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    lo, hi = iqr_fences(scores, k)
    return np.clip(scores, lo, hi)


def normalize_lambda(clipped) -> np.ndarray:
    """``clipped / sum(clipped)``, or the uniform vector when the sum is zero."""
    clipped = np.asarray(clipped, dtype=np.float64)
    if clipped.ndim != 1 or clipped.size == 0:
        raise ValueError("expected a non-empty vector")
    if np.any(clipped < 0):
        raise ValueError("importance scores must be non-negative")
    total = clipped.sum()
    if total == 0:
        return np.full(clipped.size, 1.0 / clipped.size)
    return clipped / total


def build_sensitivity(raw_qig, k: float = DEFAULT_IQR_K) -> SensitivityVector:
    raw = np.asarray(raw_qig, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw scores must be finite")
    magnitude = np.abs(raw)
    clipped = iqr_clip(magnitude, k)
    return SensitivityVector(
        raw=raw,
        magnitude=magnitude,
        clipped=clipped,
        lam=normalize_lambda(clipped),
        iqr_multiplier=k,
    )
