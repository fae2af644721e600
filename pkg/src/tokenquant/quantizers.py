"""Uniform integer quantizers for weights and activations.

Layout conventions for 2-D tensors:

* activations are ``d x T`` (channels on rows, tokens on columns), so
  ``per-token`` computes one scale per column;
* weights are ``m x d`` (output channels on rows), so ``per-channel``
  computes one scale per row and ``per-group`` splits every row into
  contiguous groups of ``group_size`` input channels.

Rounding is round-half-to-even everywhere (``np.round``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"

PER_TENSOR = "per-tensor"
PER_TOKEN = "per-token"
PER_CHANNEL = "per-channel"
PER_GROUP = "per-group"

_MODES = (SYMMETRIC, ASYMMETRIC)
_GRANULARITIES = (PER_TENSOR, PER_TOKEN, PER_CHANNEL, PER_GROUP)

DEFAULT_GROUP_SIZE = 128


@dataclass(frozen=True)
class QuantConfig:
    bits: int
    mode: str = SYMMETRIC
    granularity: str = PER_TENSOR
    group_size: int = DEFAULT_GROUP_SIZE

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be an integer in [2, 8], got {self.bits!r}")
        if self.mode not in _MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.granularity not in _GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.group_size < 1:
            raise ValueError("group_size must be positive")
        if self.mode == ASYMMETRIC and self.granularity != PER_GROUP:
            raise ValueError("asymmetric quantization is only supported per-group")
        if self.mode == SYMMETRIC and self.granularity == PER_GROUP:
            raise ValueError("symmetric quantization is not supported per-group")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1)) if self.mode == SYMMETRIC else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.mode == SYMMETRIC else 2**self.bits - 1

    def to_dict(self) -> dict:
        return {
            "bits": int(self.bits),
            "mode": self.mode,
            "granularity": self.granularity,
            "group_size": int(self.group_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        return cls(
            bits=int(d["bits"]),
            mode=d["mode"],
            granularity=d["granularity"],
            group_size=int(d.get("group_size", DEFAULT_GROUP_SIZE)),
        )


def weight_only_config(bits: int, group_size: int = DEFAULT_GROUP_SIZE) -> QuantConfig:
    """Group-wise asymmetric weight format (W3/W4 weight-only runs)."""
    return QuantConfig(bits, ASYMMETRIC, PER_GROUP, group_size)


def weight_channel_config(bits: int) -> QuantConfig:
    """Per-output-channel symmetric weight format used with activation quantization."""
    return QuantConfig(bits, SYMMETRIC, PER_CHANNEL)


def activation_config(bits: int) -> QuantConfig:
    """Per-token symmetric activation format."""
    return QuantConfig(bits, SYMMETRIC, PER_TOKEN)


@dataclass
class QuantizedTensor:
    """Integer codes plus the parameters needed to dequantize them.

    ``scales`` / ``zero_points`` / ``constants`` have the *parameter* shape:
    ``()`` per-tensor, ``t.shape`` minus the channel axis per-token, ``(m,)``
    per-channel and ``(rows, n_groups)`` per-group.  ``constants`` carries the
    value of asymmetric groups whose range is zero (scale 0); it is 0
    everywhere else.
    """

    codes: np.ndarray
    scales: np.ndarray
    config: QuantConfig
    source_shape: tuple
    zero_points: np.ndarray | None = None
    constants: np.ndarray | None = None

    def __post_init__(self):
        self.source_shape = tuple(int(s) for s in self.source_shape)

    def to_dict(self) -> dict:
        from .io import tensor_to_dict

        out = {
            "config": self.config.to_dict(),
            "source_shape": list(self.source_shape),
            "codes": tensor_to_dict(self.codes, dtype="i32"),
            "scales": tensor_to_dict(self.scales),
            "zero_points": None,
            "constants": None,
        }
        if self.zero_points is not None:
            out["zero_points"] = tensor_to_dict(self.zero_points, dtype="i32")
        if self.constants is not None:
            out["constants"] = tensor_to_dict(self.constants)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizedTensor":
        from .io import tensor_from_dict

        zp = d.get("zero_points")
        const = d.get("constants")
        return cls(
            codes=tensor_from_dict(d["codes"]),
            scales=tensor_from_dict(d["scales"]),
            config=QuantConfig.from_dict(d["config"]),
            source_shape=tuple(d["source_shape"]),
            zero_points=None if zp is None else tensor_from_dict(zp),
            constants=None if const is None else tensor_from_dict(const),
        )


def _check_input(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("cannot quantize non-finite values")
    return t


def _check_rank(t: np.ndarray, cfg: QuantConfig) -> None:
    g = cfg.granularity
    if g == PER_TOKEN and t.ndim < 2:
        raise ValueError("per-token quantization needs a (..., d, T) tensor")
    if g == PER_CHANNEL and t.ndim != 2:
        raise ValueError("per-channel quantization needs a 2-D weight matrix")
    if g == PER_GROUP and t.ndim not in (1, 2):
        raise ValueError("per-group quantization needs a 1-D or 2-D tensor")


def group_bounds(n: int, group_size: int) -> list[tuple[int, int]]:
    """Column ranges of the groups of a row of length ``n``; the last may be shorter."""
    return [(lo, min(lo + group_size, n)) for lo in range(0, n, group_size)]


def _reduce(t: np.ndarray, cfg: QuantConfig, fn) -> np.ndarray:
    g = cfg.granularity
    if g == PER_TENSOR:
        return np.asarray(fn(t, axis=None)) if t.size else np.zeros(())
    if g == PER_TOKEN:
        return fn(t, axis=-2)
    if g == PER_CHANNEL:
        return fn(t, axis=1)
    rows = np.atleast_2d(t)
    cols = [fn(rows[:, lo:hi], axis=1) for lo, hi in group_bounds(rows.shape[1], cfg.group_size)]
    return np.stack(cols, axis=1)


def expand_params(params: np.ndarray, shape: tuple, cfg: QuantConfig) -> np.ndarray:
    """Broadcast a parameter array (scales, zero-points, ...) to the full tensor shape."""
    params = np.asarray(params)
    g = cfg.granularity
    if g == PER_TENSOR:
        return np.broadcast_to(params, shape)
    if g == PER_TOKEN:
        return np.broadcast_to(np.expand_dims(params, -2), shape)
    if g == PER_CHANNEL:
        return np.broadcast_to(params[:, None], shape)
    n = shape[-1]
    sizes = [hi - lo for lo, hi in group_bounds(n, cfg.group_size)]
    full = np.repeat(np.atleast_2d(params), sizes, axis=1)
    return full.reshape(shape)


def symmetric_params(t, cfg: QuantConfig) -> np.ndarray:
    t = _check_input(t)
    _check_rank(t, cfg)
    amax = _reduce(np.abs(t), cfg, np.max)
    return np.asarray(amax / cfg.qmax, dtype=np.float64)


def asymmetric_params(w, cfg: QuantConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-group ``(scales, zero_points, constants)`` from group min/max.

    Zero-points are not clipped to the code range: an all-positive group gets
    a negative zero-point so that its own endpoints stay representable.
    """
    w = _check_input(w)
    _check_rank(w, cfg)
    wmax = _reduce(w, cfg, np.max)
    wmin = _reduce(w, cfg, np.min)
    scales = (wmax - wmin) / cfg.qmax
    flat = scales == 0
    safe = np.where(flat, 1.0, scales)
    zeros = np.where(flat, 0.0, np.round(-wmin / safe)).astype(np.int32)
    constants = np.where(flat, wmin, 0.0)
    return scales, zeros, constants


def encode(values: np.ndarray, scale: np.ndarray, zero: np.ndarray | None, cfg: QuantConfig) -> np.ndarray:
    """Elementwise integer codes given full-shape (or broadcastable) parameters."""
    values = np.asarray(values, dtype=np.float64)
    live = scale > 0
    safe = np.where(live, scale, 1.0)
    q = np.round(values / safe)
    if zero is not None:
        q = q + zero
    q = np.clip(q, cfg.qmin, cfg.qmax)
    return np.where(live, q, 0).astype(np.int32)


def decode(codes, scale, zero=None, constant=None) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float64)
    if zero is None:
        return scale * codes
    out = scale * (codes - zero)
    if constant is not None:
        out = np.where(scale > 0, out, constant)
    return out


def quantize_symmetric(t, cfg: QuantConfig) -> QuantizedTensor:
    if cfg.mode != SYMMETRIC:
        raise ValueError("quantize_symmetric needs a symmetric config")
    t = _check_input(t)
    scales = symmetric_params(t, cfg)
    codes = encode(t, expand_params(scales, t.shape, cfg), None, cfg)
    return QuantizedTensor(codes=codes, scales=scales, config=cfg, source_shape=t.shape)


def quantize_asymmetric_grouped(w, cfg: QuantConfig) -> QuantizedTensor:
    if cfg.mode != ASYMMETRIC or cfg.granularity != PER_GROUP:
        raise ValueError("quantize_asymmetric_grouped needs an asymmetric per-group config")
    w = _check_input(w)
    scales, zeros, constants = asymmetric_params(w, cfg)
    codes = encode(
        w,
        expand_params(scales, w.shape, cfg),
        expand_params(zeros, w.shape, cfg),
        cfg,
    )
    return QuantizedTensor(
        codes=codes,
        scales=scales,
        config=cfg,
        source_shape=w.shape,
        zero_points=zeros,
        constants=constants,
    )


def quantize(t, cfg: QuantConfig) -> QuantizedTensor:
    if cfg.mode == SYMMETRIC:
        return quantize_symmetric(t, cfg)
    return quantize_asymmetric_grouped(t, cfg)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    shape = q.source_shape
    if q.codes.shape != shape:
        raise ValueError(f"codes shape {q.codes.shape} does not match source shape {shape}")
    cfg = q.config
    try:
        scale = expand_params(q.scales, shape, cfg)
        if cfg.mode == SYMMETRIC:
            return decode(q.codes, scale)
        if q.zero_points is None:
            raise ValueError("asymmetric tensor is missing zero-points")
        zero = expand_params(q.zero_points, shape, cfg)
        const = None if q.constants is None else expand_params(q.constants, shape, cfg)
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed quantized tensor: {exc}") from exc
    return decode(q.codes, scale, zero, const)


def fake_quantize(t, cfg: QuantConfig | None) -> np.ndarray:
    """``dequantize(quantize(t, cfg))``; ``cfg=None`` is the identity."""
    if cfg is None:
        return np.array(t, dtype=np.float64)
    return dequantize(quantize(t, cfg))
