"""Level-local classifier: dropout, then a linear layer whose softmax gives class probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import ShapeError
from .params import Params, make_params, truncated_normal


@dataclass
class HeadParams:
    level: int
    w: nm.Tensor  # [in_dim, num_classes]
    b: nm.Tensor  # [num_classes]
    dropout_p: float = 0.1

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]

    @property
    def num_classes(self) -> int:
        return self.w.shape[1]

    def params(self) -> Params:
        return {"w": self.w, "b": self.b}


def init_head(level: int, in_dim: int, num_classes: int, seed: int, dropout_p: float = 0.1) -> HeadParams:
    rng = np.random.default_rng(seed)
    p = make_params({"w": truncated_normal(rng, (in_dim, num_classes)), "b": np.zeros(num_classes)})
    return HeadParams(level, p["w"], p["b"], dropout_p)


def head_forward(head: HeadParams, features: nm.Tensor, train: bool = False,
                 rng: np.random.Generator | None = None) -> nm.Tensor:
    if features.shape[-1] != head.in_dim:
        raise ShapeError(f"head for level {head.level} expects {head.in_dim} features, got {features.shape[-1]}")
    return nm.linear(nm.dropout(features, head.dropout_p, train, rng), head.w, head.b)


def predict(logits) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    z = logits.data if isinstance(logits, nm.Tensor) else np.asarray(logits)
    return np.argmax(z, axis=-1)


def probabilities(logits) -> np.ndarray:
    z = logits.data if isinstance(logits, nm.Tensor) else np.asarray(logits, dtype=np.float64)
    return nm.softmax_array(z)
