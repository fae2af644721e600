"""Small transformer-style blocks with full-precision and quantized execution.

Inputs are ``d x T`` activation matrices (tokens are columns).  Three block
kinds are supported:

* ``linear``:    ``W x``
* ``mlp``:       ``W_down gelu(W_up x)``
* ``attention``: single-head ``W_o (W_v x) softmax((W_q x)^T (W_k x) / sqrt(d))^T``

Gradients are hand-written reverse mode; :func:`grad_input_fd` is the
central-difference oracle used to check them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .quantizers import QuantConfig, fake_quantize

LINEAR = "linear"
MLP = "mlp"
ATTENTION = "attention"

LAYER_NAMES = {
    LINEAR: ("W",),
    MLP: ("W_up", "W_down"),
    ATTENTION: ("W_q", "W_k", "W_v", "W_o"),
}

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(h):
    return 0.5 * h * (1.0 + erf(h / _SQRT2))


def gelu_grad(h):
    cdf = 0.5 * (1.0 + erf(h / _SQRT2))
    return cdf + h * _INV_SQRT2PI * np.exp(-0.5 * h * h)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _T(a):
    return np.swapaxes(a, -1, -2)


@dataclass(frozen=True)
class BlockModel:
    kind: str
    weights: dict

    def __post_init__(self):
        if self.kind not in LAYER_NAMES:
            raise ValueError(f"unknown block kind {self.kind!r}")
        names = LAYER_NAMES[self.kind]
        if set(self.weights) != set(names):
            raise ValueError(f"{self.kind} block needs weights {names}, got {sorted(self.weights)}")
        frozen = {}
        for name in names:
            w = np.array(self.weights[name], dtype=np.float64)
            if w.ndim != 2 or min(w.shape) < 1:
                raise ValueError(f"weight {name} must be a non-empty matrix")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"weight {name} has non-finite entries")
            w.setflags(write=False)
            frozen[name] = w
        object.__setattr__(self, "weights", frozen)

        w = frozen
        if self.kind == MLP:
            up, down = w["W_up"], w["W_down"]
            if down.shape != (up.shape[1], up.shape[0]):
                raise ValueError(f"W_down shape {down.shape} inconsistent with W_up {up.shape}")
        elif self.kind == ATTENTION:
            d = w["W_q"].shape[0]
            for name in names:
                if w[name].shape != (d, d):
                    raise ValueError(f"attention weights must all be {d}x{d}")

    @property
    def d(self) -> int:
        return self.weights[LAYER_NAMES[self.kind][0]].shape[1]

    @property
    def m(self) -> int:
        return self.weights[LAYER_NAMES[self.kind][-1]].shape[0]

    @property
    def layer_names(self) -> tuple:
        return LAYER_NAMES[self.kind]

    @classmethod
    def random(cls, kind: str, d: int, m: int | None = None, rng=None) -> "BlockModel":
        """Gaussian weights scaled by ``1/sqrt(fan_in)``; ``m`` only matters for ``linear``."""
        rng = np.random.default_rng(rng)
        if d < 1 or (m is not None and m < 1):
            raise ValueError("dimensions must be positive")

        def init(rows, cols):
            return rng.standard_normal((rows, cols)) / np.sqrt(cols)

        if kind == LINEAR:
            weights = {"W": init(m or d, d)}
        elif kind == MLP:
            weights = {"W_up": init(4 * d, d), "W_down": init(d, 4 * d)}
        elif kind == ATTENTION:
            weights = {name: init(d, d) for name in LAYER_NAMES[ATTENTION]}
        else:
            raise ValueError(f"unknown block kind {kind!r}")
        return cls(kind, weights)

    def to_dict(self) -> dict:
        from .io import tensor_to_dict

        return {
            "kind": self.kind,
            "weights": {k: tensor_to_dict(v, name=k) for k, v in self.weights.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockModel":
        from .io import tensor_from_dict

        return cls(d["kind"], {k: tensor_from_dict(v) for k, v in d["weights"].items()})


@dataclass(frozen=True)
class QuantizedExecution:
    """How to run a block quantized.

    ``weight_cfg=None`` keeps weights in full precision and ``act_cfg=None``
    means weight-only quantization.  ``equalization`` is either one scale
    vector, applied to every linear sub-layer whose input width matches its
    length, or a mapping from sub-layer name to scale vector.
    """

    weight_cfg: QuantConfig | None
    act_cfg: QuantConfig | None = None
    equalization: object = None

    def __post_init__(self):
        eq = self.equalization
        if eq is None:
            return
        vectors = eq.values() if isinstance(eq, dict) else [eq]
        for e in vectors:
            e = np.asarray(e, dtype=np.float64)
            if e.ndim != 1 or not np.all(np.isfinite(e)) or np.any(e <= 0):
                raise ValueError("equalization scales must be a finite, strictly positive vector")

    def scales_for(self, name: str, width: int):
        eq = self.equalization
        if eq is None:
            return None
        e = eq.get(name) if isinstance(eq, dict) else eq
        if e is None:
            return None
        e = np.asarray(e, dtype=np.float64)
        if len(e) != width:
            if isinstance(eq, dict):
                raise ValueError(f"equalization for {name} has length {len(e)}, expected {width}")
            return None
        return e


def full_precision_layers(model: BlockModel) -> dict:
    return {name: (w, None) for name, w in model.weights.items()}


def quantized_layers(model: BlockModel, exec_: QuantizedExecution) -> dict:
    """Per sub-layer ``(effective weight, input pre-scale)`` for the quantized path.

    The effective weight is ``fake_quantize(W * E)`` and the pre-scale is
    ``1/E``, so the layer computes ``Q_W(W * E) (E^-1 * x)``.
    """
    layers = {}
    for name, w in model.weights.items():
        e = exec_.scales_for(name, w.shape[1])
        if e is None:
            layers[name] = (fake_quantize(w, exec_.weight_cfg), None)
        else:
            layers[name] = (fake_quantize(w * e[None, :], exec_.weight_cfg), 1.0 / e)
    return layers


def _linear(layers, name, inp, act_cfg):
    w, pre = layers[name]
    z = inp if pre is None else inp * pre[:, None]
    if act_cfg is not None:
        z = fake_quantize(z, act_cfg)
    return w @ z


def _linear_back(layers, name, g):
    w, pre = layers[name]
    gz = w.T @ g
    return gz if pre is None else gz * pre[:, None]


def _forward(kind, layers, x, act_cfg=None):
    """Returns ``(output, cache)``; the cache feeds :func:`_backward`."""
    if kind == LINEAR:
        return _linear(layers, "W", x, act_cfg), None
    if kind == MLP:
        h = _linear(layers, "W_up", x, act_cfg)
        a = gelu(h)
        return _linear(layers, "W_down", a, act_cfg), (h,)
    d = x.shape[-2]
    q = _linear(layers, "W_q", x, act_cfg)
    k = _linear(layers, "W_k", x, act_cfg)
    v = _linear(layers, "W_v", x, act_cfg)
    attn = _softmax(_T(q) @ k / np.sqrt(d))
    ctx = v @ _T(attn)
    return _linear(layers, "W_o", ctx, act_cfg), (q, k, v, attn)


def _backward(kind, layers, cache, gy):
    if kind == LINEAR:
        return _linear_back(layers, "W", gy)
    if kind == MLP:
        (h,) = cache
        ga = _linear_back(layers, "W_down", gy)
        return _linear_back(layers, "W_up", ga * gelu_grad(h))
    q, k, v, attn = cache
    d = q.shape[-2]
    gctx = _linear_back(layers, "W_o", gy)
    gv = gctx @ attn
    gattn = _T(gctx) @ v
    gs = attn * (gattn - np.sum(gattn * attn, axis=-1, keepdims=True))
    gs = gs / np.sqrt(d)
    gq = k @ _T(gs)
    gk = q @ gs
    return (
        _linear_back(layers, "W_q", gq)
        + _linear_back(layers, "W_k", gk)
        + _linear_back(layers, "W_v", gv)
    )


def _check_x(model: BlockModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] != model.d:
        raise ValueError(f"input must have {model.d} rows (channels), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input has non-finite entries")
    return x


def block_forward(model: BlockModel, x) -> np.ndarray:
    x = _check_x(model, x)
    return _forward(model.kind, full_precision_layers(model), x)[0]


def block_forward_quantized(model: BlockModel, x, exec_: QuantizedExecution) -> np.ndarray:
    """Quantized execution: every linear sub-layer runs ``Q_W(W*E) Q_X(E^-1 * x)``.

    Nonlinearities stay in full precision.
    """
    x = _check_x(model, x)
    return _forward(model.kind, quantized_layers(model, exec_), x, exec_.act_cfg)[0]


class DistortionObjective:
    """``L(x) = mean |f(x, w) - f(x, w_q)|`` and its input gradient.

    The quantized branch uses quantized (and equalized) weights with
    full-precision activations; activation quantization only enters
    attribution through the baseline.  This keeps ``L`` continuous along the
    attribution path.  The subgradient of ``|u|`` at ``u = 0`` is 0.
    """

    def __init__(self, model: BlockModel, exec_: QuantizedExecution):
        self.model = model
        self.exec = exec_
        self._fp = full_precision_layers(model)
        self._q = quantized_layers(model, exec_)

    def residual(self, x) -> np.ndarray:
        """Pre-absolute-value gap ``f(x, w) - f(x, w_q)``."""
        x = _check_x(self.model, x)
        kind = self.model.kind
        return _forward(kind, self._fp, x)[0] - _forward(kind, self._q, x)[0]

    def per_token(self, x) -> np.ndarray:
        return np.mean(np.abs(self.residual(x)), axis=-2)

    def value(self, x) -> float:
        return float(np.mean(np.abs(self.residual(x))))

    def __call__(self, x) -> float:
        return self.value(x)

    def grad(self, x) -> np.ndarray:
        x = _check_x(self.model, x)
        if x.ndim != 2:
            raise ValueError("gradients are computed for a single d x T input")
        kind = self.model.kind
        y_fp, c_fp = _forward(kind, self._fp, x)
        y_q, c_q = _forward(kind, self._q, x)
        r = y_fp - y_q
        gr = np.sign(r) / r.size
        g = _backward(kind, self._fp, c_fp, gr) - _backward(kind, self._q, c_q, gr)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
        return g


def grad_input(model: BlockModel, exec_: QuantizedExecution, x) -> np.ndarray:
    """Analytic gradient of the distortion objective with respect to ``x``."""
    return DistortionObjective(model, exec_).grad(x)


def grad_input_fd(fn, x, epsilon: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the scalar function ``fn`` at ``x``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + epsilon
        fp = fn(x)
        x[idx] = orig - epsilon
        fm = fn(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * epsilon)
    return g


@dataclass
class QuantizedBlock:
    """A block with stored integer weights and baked-in equalization.

    ``weights[name]`` holds the codes of ``W * E`` and ``equalization[name]``
    the scale vector ``E`` (``None`` when the sub-layer is not equalized).
    """

    kind: str
    weights: dict
    equalization: dict = field(default_factory=dict)
    act_cfg: QuantConfig | None = None

    def __post_init__(self):
        if self.kind not in LAYER_NAMES or set(self.weights) != set(LAYER_NAMES[self.kind]):
            raise ValueError(f"weights do not match block kind {self.kind!r}")

    def layers(self) -> dict:
        from .quantizers import dequantize

        out = {}
        for name, qt in self.weights.items():
            e = self.equalization.get(name)
            out[name] = (dequantize(qt), None if e is None else 1.0 / np.asarray(e))
        return out

    @property
    def d(self) -> int:
        return self.weights[LAYER_NAMES[self.kind][0]].source_shape[1]

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 2 or x.shape[-2] != self.d:
            raise ValueError(f"input must have {self.d} rows (channels), got shape {x.shape}")
        return _forward(self.kind, self.layers(), x, self.act_cfg)[0]

    def to_dict(self) -> dict:
        from .io import tensor_to_dict

        return {
            "kind": self.kind,
            "format": "quantized",
            "act_cfg": None if self.act_cfg is None else self.act_cfg.to_dict(),
            "weights": {k: v.to_dict() for k, v in self.weights.items()},
            "equalization": {
                k: tensor_to_dict(v, name=k) for k, v in self.equalization.items() if v is not None
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizedBlock":
        from .io import tensor_from_dict
        from .quantizers import QuantizedTensor

        act = d.get("act_cfg")
        return cls(
            kind=d["kind"],
            weights={k: QuantizedTensor.from_dict(v) for k, v in d["weights"].items()},
            equalization={k: tensor_from_dict(v) for k, v in d.get("equalization", {}).items()},
            act_cfg=None if act is None else QuantConfig.from_dict(act),
        )


def sublayer_inputs(model: BlockModel, x) -> dict:
    """Full-precision input activation of every linear sub-layer."""
    x = _check_x(model, x)
    if model.kind == LINEAR:
        return {"W": x}
    if model.kind == MLP:
        _, (h,) = _forward(MLP, full_precision_layers(model), x)
        return {"W_up": x, "W_down": gelu(h)}
    _, (q, k, v, attn) = _forward(ATTENTION, full_precision_layers(model), x)
    ctx = v @ _T(attn)
    return {"W_q": x, "W_k": x, "W_v": x, "W_o": ctx}
