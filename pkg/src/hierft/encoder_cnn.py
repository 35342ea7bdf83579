"""Text-CNN backbone: embedding, three parallel convolutions, masked max-over-time pooling."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numeric as nm
from .errors import ContractError, ShapeError
from .params import Params, make_params, truncated_normal


@dataclass
class CnnConfig:
    vocab_size: int
    embed_dim: int = 300
    kernel_widths: list[int] = field(default_factory=lambda: [3, 4, 5])
    filters_per_width: int = 100
    dropout_p: float = 0.1

    def __post_init__(self):
        self.kernel_widths = [int(w) for w in self.kernel_widths]
        if len(self.kernel_widths) != 3:
            raise ContractError(f"cnn config: exactly 3 kernel widths required, got {self.kernel_widths}")
        if min(self.kernel_widths) < 1 or min(self.vocab_size, self.embed_dim, self.filters_per_width) < 1:
            raise ContractError("cnn config: sizes must be at least 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError("cnn config: dropout_p must lie in [0, 1)")

    @property
    def feature_dim(self) -> int:
        return 3 * self.filters_per_width

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: CnnConfig) -> dict[str, tuple]:
    shapes = {"tok_emb": (cfg.vocab_size, cfg.embed_dim)}
    for i, w in enumerate(cfg.kernel_widths):
        shapes[f"conv{i}.kernel"] = (w, cfg.embed_dim, cfg.filters_per_width)
        shapes[f"conv{i}.b"] = (cfg.filters_per_width,)
    return shapes


def init_cnn(cfg: CnnConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    arrays = {name: np.zeros(shape) if name.endswith(".b") else truncated_normal(rng, shape)
              for name, shape in param_shapes(cfg).items()}
    return make_params(arrays)


def encode_batch_cnn(params: Params, cfg: CnnConfig, token_ids, mask, train: bool = False,
                     rng: np.random.Generator | None = None) -> nm.Tensor:
    """``[B, 3 * filters]`` features.

    Pad embeddings are zeroed and windows are scored only at unmasked start
    positions, so trailing pads never change the output.
    """
    token_ids = np.asarray(token_ids)
    mask = np.asarray(mask)
    if token_ids.ndim != 2 or mask.shape != token_ids.shape:
        raise ShapeError(f"token_ids {token_ids.shape} and mask {mask.shape} must both be [B, L]")
    keep = nm.Tensor(mask[:, :, None].astype(np.float64))
    emb = nm.mul(nm.embedding(params["tok_emb"], token_ids), keep)
    pooled = []
    for i, w in enumerate(cfg.kernel_widths):
        kernel = nm.reshape(params[f"conv{i}.kernel"], (w * cfg.embed_dim, cfg.filters_per_width))
        conv = nm.relu(nm.linear(nm.unfold(emb, w), kernel, params[f"conv{i}.b"]))
        pooled.append(nm.masked_max(conv, mask > 0))
    return nm.dropout(nm.concat(pooled, axis=1), cfg.dropout_p, train, rng)
