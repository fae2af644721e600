"""Slow, straight-line reference implementations used as test oracles.

Nothing here shares code paths with the production routines beyond the
element-wise quantizer itself.
"""

from __future__ import annotations

import math

import numpy as np

from .quantizers import (
    SYMMETRIC,
    QuantConfig,
    asymmetric_params,
    decode,
    encode,
    expand_params,
    fake_quantize,
    symmetric_params,
)


def nearest_code(v: float, scale: float, codes) -> int:
    """Brute-force nearest representable value; exact ties go to the even code."""
    best = None
    for c in codes:
        dist = abs(v - scale * c)
        if best is None or dist < best[0] or (dist == best[0] and c % 2 == 0):
            best = (dist, c)
    return best[1]


def naive_matmul(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    n, k = A.shape
    k2, p = B.shape
    assert k == k2
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            s = 0.0
            for t in range(k):
                s += A[i, t] * B[t, j]
            out[i, j] = s
    return out


def naive_distortion(y_fp, y_q):
    m, T = len(y_fp), len(y_fp[0])
    per_token = []
    for t in range(T):
        s = 0.0
        for h in range(m):
            s += abs(y_fp[h][t] - y_q[h][t])
        per_token.append(s / m)
    return per_token, sum(per_token) / T


def naive_weighted_objective(W, X, E, lam, wcfg, acfg=None) -> float:
    """Per-token loop over ``lam_i * ||Q_W(W*E) Q_X(E^-1 * X_i) - W X_i||^2``."""
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    m, d = W.shape
    WE = np.array([[W[r, c] * E[c] for c in range(d)] for r in range(m)])
    Wq = fake_quantize(WE, wcfg)
    total = 0.0
    for i in range(X.shape[1]):
        col = np.array([[X[c, i] / E[c]] for c in range(d)])
        if acfg is not None:
            col = fake_quantize(col, acfg)
        err = 0.0
        for r in range(m):
            approx = sum(Wq[r, c] * col[c, 0] for c in range(d))
            exact = sum(W[r, c] * X[c, i] for c in range(d))
            err += (approx - exact) ** 2
        total += lam[i] * err
    return total


def naive_candidates(W, X, grid_size: int, floor: float = 1e-5):
    """``[(alpha, E)]`` for the power family followed by ``(None, ones)``."""
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    m, d = W.shape
    out = []
    for k in range(grid_size):
        alpha = k / (grid_size - 1)
        E = []
        for c in range(d):
            xm = max(abs(X[c, t]) for t in range(X.shape[1]))
            wm = max(max(abs(W[r, c]) for r in range(m)), floor)
            E.append(max(xm**alpha / wm ** (1 - alpha), floor))
        g = math.sqrt(max(E) * min(E))
        E = [max(e / g, floor) for e in E]
        for c in range(d):
            if max(abs(X[c, t]) for t in range(X.shape[1])) == 0:
                E[c] = 1.0
        out.append((alpha, np.array(E)))
    out.append((None, np.ones(d)))
    return out


def exhaustive_search(W, X, lam, wcfg, acfg=None, grid_size: int = 21, tie_rtol: float = 1e-12):
    """Evaluate every candidate with the naive objective; same tie rule as the search."""
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    ref = sum(lam[i] * float(np.sum((W @ X[:, i]) ** 2)) for i in range(X.shape[1]))
    tol = tie_rtol * ref
    values = [(a, E, naive_weighted_objective(W, X, E, lam, wcfg, acfg)) for a, E in naive_candidates(W, X, grid_size)]
    best = values[0]
    for cand in values[1:-1]:
        if cand[2] < best[2] - tol:
            best = cand
    if values[-1][2] <= best[2] + tol:
        best = values[-1]
    return best[0], best[2], values


def naive_hessian(X, lam, damping_frac: float = 0.01):
    X = np.asarray(X, dtype=np.float64)
    d, T = X.shape
    H = np.zeros((d, d))
    for i in range(T):
        for a in range(d):
            for b in range(d):
                H[a, b] += lam[i] * X[a, i] * X[b, i]
    damp = damping_frac * sum(H[a, a] for a in range(d)) / d
    for a in range(d):
        H[a, a] += damp
    return H


def reference_gptq(W, H, wcfg: QuantConfig) -> np.ndarray:
    """Textbook column-sequential GPTQ with an explicit inverse downdated per column.

    Returns integer codes.  Quantization parameters come from the unmodified
    ``W`` (static scales).
    """
    W = np.array(W, dtype=np.float64)
    m, d = W.shape
    if wcfg.mode == SYMMETRIC:
        S = expand_params(symmetric_params(W, wcfg), W.shape, wcfg)
        Z = C = None
    else:
        s, z, c = asymmetric_params(W, wcfg)
        S, Z, C = (expand_params(p, W.shape, wcfg) for p in (s, z, c))
    Hinv = np.linalg.inv(np.asarray(H, dtype=np.float64))
    codes = np.zeros(W.shape, dtype=np.int32)
    for j in range(d):
        z = None if Z is None else Z[:, j]
        codes[:, j] = encode(W[:, j], S[:, j], z, wcfg)
        q = decode(codes[:, j], S[:, j], z, None if C is None else C[:, j])
        err = (W[:, j] - q) / Hinv[j, j]
        for k in range(j + 1, d):
            W[:, k] -= err * Hinv[j, k]
        # eliminate column j from the remaining inverse Hessian
        Hinv = Hinv - np.outer(Hinv[:, j], Hinv[j, :]) / Hinv[j, j]
    return codes
