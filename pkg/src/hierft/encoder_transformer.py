"""Bidirectional transformer encoder with ``<cls>`` pooling.

Pre-norm blocks: ``x + Attn(LN(x))`` then ``x + FFN(LN(x))`` with GELU. Learned
position embeddings; the embedding sum is layer-normed before the first block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numeric as nm
from .errors import ContractError, ShapeError
from .params import Params, make_params, truncated_normal

MASK_BIAS = -1e9
LN_EPS = 1e-12


@dataclass
class TransformerConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int | None = None
    max_positions: int = 64
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_positions"):
            if getattr(self, name) < 1:
                raise ContractError(f"transformer config: {name} must be at least 1")
        if self.d_model % self.n_heads:
            raise ContractError(f"transformer config: n_heads={self.n_heads} must divide d_model={self.d_model}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError("transformer config: dropout_p must lie in [0, 1)")

    @property
    def feature_dim(self) -> int:
        return self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: TransformerConfig) -> dict[str, tuple]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_positions, d),
        "emb_ln.g": (d,),
        "emb_ln.b": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        for w in ("q", "k", "v", "o"):
            shapes[p + f"w_{w}"] = (d, d)
            if w != "k":
                # a key bias shifts every score in a row equally, so softmax cancels it
                shapes[p + f"b_{w}"] = (d,)
        shapes.update({p + "ln1.g": (d,), p + "ln1.b": (d,), p + "ln2.g": (d,), p + "ln2.b": (d,),
                       p + "w_1": (d, f), p + "b_1": (f,), p + "w_2": (f, d), p + "b_2": (d,)})
    return shapes


def init_encoder(cfg: TransformerConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arrays[name] = np.ones(shape)
        elif leaf == "b" or leaf.startswith("b_"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = truncated_normal(rng, shape)
    return make_params(arrays)


def _proj(x, params, prefix, which):
    return nm.linear(x, params[f"{prefix}w_{which}"], params.get(f"{prefix}b_{which}"))


def encode_batch(params: Params, cfg: TransformerConfig, token_ids, mask, train: bool = False,
                 rng: np.random.Generator | None = None) -> nm.Tensor:
    """Pooled ``[B, d_model]`` representation: final hidden state at position 0."""
    token_ids = np.asarray(token_ids)
    mask = np.asarray(mask)
    if token_ids.ndim != 2 or mask.shape != token_ids.shape:
        raise ShapeError(f"token_ids {token_ids.shape} and mask {mask.shape} must both be [B, L]")
    b, length = token_ids.shape
    if length > cfg.max_positions:
        raise ContractError(f"sequence length {length} exceeds max_positions={cfg.max_positions}")
    p = cfg.dropout_p
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

    x = nm.add(nm.embedding(params["tok_emb"], token_ids), nm.index(params["pos_emb"], slice(0, length)))
    x = nm.layer_norm(x, params["emb_ln.g"], params["emb_ln.b"], LN_EPS)
    x = nm.dropout(x, p, train, rng)
    bias = nm.Tensor(np.where(mask[:, None, None, :] > 0, 0.0, MASK_BIAS))  # [B,1,1,L]

    def heads(t):
        return nm.transpose(nm.reshape(t, (b, length, h, dh)), (0, 2, 1, 3))

    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        y = nm.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"], LN_EPS)
        q, k, v = (heads(_proj(y, params, pre, w)) for w in "qkv")
        scores = nm.add(nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)), bias)
        attn = nm.dropout(nm.softmax(scores), p, train, rng)
        ctx = nm.reshape(nm.transpose(nm.matmul(attn, v), (0, 2, 1, 3)), (b, length, cfg.d_model))
        x = nm.add(x, nm.dropout(_proj(ctx, params, pre, "o"), p, train, rng))

        y = nm.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"], LN_EPS)
        y = nm.linear(nm.gelu(nm.linear(y, params[pre + "w_1"], params[pre + "b_1"])),
                      params[pre + "w_2"], params[pre + "b_2"])
        x = nm.add(x, nm.dropout(y, p, train, rng))

    return nm.index(x, (slice(None), 0))
