"""JSON tensor container and seeding helpers.

A tensor file is ``{"dtype": "f64" | "i32", "shape": [...], "data": [...]}``
with row-major ``data`` and an optional ``"name"``.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

_DTYPES = {"f64": np.float64, "i32": np.int32}


def tensor_to_dict(a, dtype: str | None = None, name: str | None = None) -> dict:
    a = np.asarray(a)
    if dtype is None:
        dtype = "i32" if np.issubdtype(a.dtype, np.integer) else "f64"
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    flat = a.astype(_DTYPES[dtype]).ravel()
    if dtype == "f64":
        if not np.all(np.isfinite(flat)):
            raise ValueError("tensor files hold finite numbers only")
        data = [float(v) for v in flat]
    else:
        data = [int(v) for v in flat]
    out = {"dtype": dtype, "shape": [int(s) for s in a.shape], "data": data}
    if name is not None:
        out["name"] = name
    return out


def tensor_from_dict(d: dict) -> np.ndarray:
    dtype = d.get("dtype")
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    shape = tuple(int(s) for s in d["shape"])
    data = d["data"]
    if math.prod(shape) != len(data):
        raise ValueError(f"shape {shape} does not match {len(data)} data values")
    a = np.asarray(data, dtype=_DTYPES[dtype]).reshape(shape)
    if dtype == "f64" and not np.all(np.isfinite(a)):
        raise ValueError("tensor files hold finite numbers only")
    return a


def dump_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def save_tensor(a, path, name: str | None = None) -> None:
    dump_json(tensor_to_dict(a, name=name), path)


def load_tensor(path) -> np.ndarray:
    return tensor_from_dict(load_json(path))


def derive_seed(seed: int, tag: str) -> int:
    """64-bit sub-seed: first 8 bytes of sha256("<seed>:<tag>"), big-endian."""
    digest = hashlib.sha256(f"{int(seed)}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def rng_for(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag))
