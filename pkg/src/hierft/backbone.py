"""Uniform access to the two encoder families by name."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import encoder_cnn, encoder_transformer
from .errors import ContractError

BACKBONES = ("transformer", "cnn")


@dataclass(frozen=True)
class Backbone:
    name: str
    config_cls: type
    init: Callable
    forward: Callable
    shapes: Callable


_REGISTRY = {
    "transformer": Backbone("transformer", encoder_transformer.TransformerConfig, encoder_transformer.init_encoder,
                            encoder_transformer.encode_batch, encoder_transformer.param_shapes),
    "cnn": Backbone("cnn", encoder_cnn.CnnConfig, encoder_cnn.init_cnn, encoder_cnn.encode_batch_cnn,
                    encoder_cnn.param_shapes),
}


def get(name: str) -> Backbone:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ContractError(f"unknown backbone {name!r}; expected one of {', '.join(BACKBONES)}") from None


def make_config(name: str, vocab_size: int, seq_len: int, overrides: dict | None = None,
                dropout_p: float | None = None):
    """Backbone config sized for a corpus; ``overrides`` holds user-chosen dimensions."""
    fields = dict(overrides or {})
    fields["vocab_size"] = vocab_size
    if dropout_p is not None:
        fields.setdefault("dropout_p", dropout_p)
    if name == "transformer":
        fields.setdefault("max_positions", seq_len)
    try:
        return get(name).config_cls(**fields)
    except TypeError as exc:
        raise ContractError(f"{name} config: {exc}") from None


def config_from_dict(name: str, fields: dict):
    return get(name).config_cls(**fields)
