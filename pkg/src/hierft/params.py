"""Named parameter sets and initialisation shared by encoders and heads."""

from __future__ import annotations

import hashlib
from typing import Mapping

import numpy as np

from .errors import ShapeError
from .numeric import Tensor

Params = dict[str, Tensor]

INIT_STD = 0.02


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def make_params(arrays: Mapping[str, np.ndarray]) -> Params:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in arrays.items()}


def copy_params(params: Params) -> Params:
    return make_params({k: t.data for k, t in params.items()})


def to_arrays(params: Params) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.items()}


def check_shapes(params: Mapping, expected: Mapping[str, tuple], where: str = "parameters"):
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ShapeError(f"{where}: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        got = tuple(np.shape(params[name].data if isinstance(params[name], Tensor) else params[name]))
        if got != tuple(shape):
            raise ShapeError(f"{where}: tensor {name!r} has shape {got}, expected {tuple(shape)}")


def digest(params: Mapping) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else params[name]
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def equal(a: Mapping, b: Mapping) -> bool:
    """Bitwise equality of two parameter maps."""
    if set(a) != set(b):
        return False
    return all(np.array_equal(_arr(a[k]), _arr(b[k])) and _arr(a[k]).tobytes() == _arr(b[k]).tobytes() for k in a)


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)
