"""Level-wise training under the flat, hier and hft regimes, plus checkpoints.

* ``hft``: one encoder trained on level 2, then handed (as trained) to level 3 for
  further fine-tuning with a fresh level-3 head.
* ``hier``: an independently initialised encoder and head per level.
* ``flat``: one encoder, two heads, trained on the summed per-level losses.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import backbone as bb
from . import container
from . import numeric as nm
from . import params as P
from .corpus import EncodedCorpus
from .errors import ContractError, FormatError, ShapeError
from .head import HeadParams, head_forward, init_head, predict
from .params import Params

REGIMES = ("flat", "hier", "hft")
LEVELS = (2, 3)
CHECKPOINT_FORMAT = "hierft-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    regime: str = "hft"
    backbone: str = "transformer"
    epochs_per_level: int = 10
    batch_size: int = 128
    lr_max: float = 1e-3
    lr_min: float = 0.0
    dropout_p: float = 0.1
    seed: int = 0
    backbone_config: dict = field(default_factory=dict)
    shuffle: bool = True

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ContractError(f"unknown regime {self.regime!r}; expected one of {', '.join(REGIMES)}")
        bb.get(self.backbone)
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if self.epochs_per_level < 0:
            raise ContractError("epochs_per_level must be non-negative")
        if not self.lr_max >= self.lr_min >= 0:
            raise ContractError("learning rates must satisfy lr_max >= lr_min >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ContractError(f"unknown training option(s): {', '.join(unknown)}")
        return cls(**doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def derive_seed(seed: int, *tags: int) -> int:
    """Independent child seed for a (purpose, level) tag."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


# tags for derive_seed
_ENC, _HEAD, _TRAIN = 1, 2, 3
_JOINT = 0


# ---------------------------------------------------------------------------
# schedule and optimizer


def lr_at(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``."""
    if total_steps < 1:
        raise ContractError("total_steps must be at least 1")
    if step < 0:
        raise ContractError("step must be non-negative")
    if step >= total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: Params) -> OptimizerState:
    return OptimizerState({k: np.zeros_like(t.data) for k, t in params.items()},
                          {k: np.zeros_like(t.data) for k, t in params.items()})


def optimizer_step(params: Params, grads: dict, state: OptimizerState, lr: float):
    """One Adam update with bias correction. Missing gradients count as zero.

    Parameter arrays are replaced rather than modified, so earlier snapshots of
    ``t.data`` stay valid.
    """
    if set(state.m) != set(params):
        raise ContractError("optimizer state does not match the parameter set")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        elif np.shape(g) != t.shape:
            raise ContractError(f"gradient for {name!r} has shape {np.shape(g)}, parameter has {t.shape}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# training


@dataclass
class LevelRun:
    level: int
    classes: list[str]
    encoder_init: dict[str, np.ndarray]
    encoder: Params
    head: HeadParams
    history: list[dict]


def backbone_config_for(corpus: EncodedCorpus, config: TrainConfig):
    return bb.make_config(config.backbone, len(corpus.vocab), corpus.max_len + 1,
                          config.backbone_config, config.dropout_p)


def _fit(encoder: Params, bcfg, heads: dict[int, HeadParams], corpus: EncodedCorpus, config: TrainConfig,
         rng: np.random.Generator) -> list[dict]:
    train_idx = corpus.subset("train")
    n = len(train_idx)
    if n == 0:
        raise ContractError("the corpus has an empty training split")
    forward = bb.get(config.backbone).forward
    everything = {f"encoder.{k}": t for k, t in encoder.items()}
    for lvl, h in heads.items():
        everything.update({f"head{lvl}.{k}": t for k, t in h.params().items()})
    state = init_optimizer(everything)
    bs = config.batch_size
    total = config.epochs_per_level * math.ceil(n / bs)
    step = 0
    history = []
    for epoch in range(config.epochs_per_level):
        order = rng.permutation(train_idx) if config.shuffle else train_idx
        loss_sum = 0.0
        correct = {lvl: 0 for lvl in heads}
        lr = config.lr_max
        for start in range(0, n, bs):
            rows = order[start:start + bs]
            for t in everything.values():
                t.grad = None
            feats = forward(encoder, bcfg, corpus.token_ids[rows], corpus.mask[rows], train=True, rng=rng)
            loss = None
            for lvl, h in heads.items():
                logits = head_forward(h, feats, train=True, rng=rng)
                y = corpus.labels(lvl)[rows]
                term = nm.cross_entropy(logits, y)
                loss = term if loss is None else nm.add(loss, term)
                correct[lvl] += int((predict(logits) == y).sum())
            loss.backward()
            lr = lr_at(step, total, config.lr_max, config.lr_min)
            optimizer_step(everything, {k: t.grad for k, t in everything.items()}, state, lr)
            step += 1
            loss_sum += loss.item() * len(rows)
        entry = {"epoch": epoch + 1, "loss": loss_sum / n, "lr": lr}
        entry.update({f"train_acc_level{lvl}": correct[lvl] / n for lvl in heads})
        history.append(entry)
    return history


def train_level(encoder_params: Params, corpus: EncodedCorpus, level: int, config: TrainConfig, head_seed: int,
                rng: np.random.Generator | None = None, bcfg=None) -> LevelRun:
    """Fine-tune a copy of ``encoder_params`` together with a fresh head for ``level``."""
    if level not in LEVELS:
        raise ContractError(f"level must be 2 or 3, got {level}")
    bcfg = bcfg or backbone_config_for(corpus, config)
    P.check_shapes(encoder_params, bb.get(config.backbone).shapes(bcfg), "encoder")
    classes = corpus.classes(level)
    encoder = P.copy_params(encoder_params)
    init_snapshot = P.to_arrays(encoder)
    head = init_head(level, bcfg.feature_dim, len(classes), head_seed, config.dropout_p)
    if rng is None:
        rng = np.random.default_rng(derive_seed(config.seed, _TRAIN, level))
    history = _fit(encoder, bcfg, {level: head}, corpus, config, rng)
    return LevelRun(level, classes, init_snapshot, encoder, head, history)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    regime: str
    backbone: str
    backbone_config: dict
    train_config: dict
    tensors: dict[str, np.ndarray]
    level_encoders: dict[int, str]
    histories: dict[str, list]
    rng_state: dict
    corpus_meta: dict
    version: int = CHECKPOINT_VERSION

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.train_config, sort_keys=True).encode()).hexdigest()

    def backbone_cfg(self):
        return bb.config_from_dict(self.backbone, self.backbone_config)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def encoder(self, level: int) -> Params:
        return P.make_params(self.group(self.level_encoders[level]))

    def encoder_init(self, level: int) -> dict[str, np.ndarray]:
        return self.group(self.level_encoders[level] + "_init")

    def has_head(self, level: int) -> bool:
        return f"level{level}.head.w" in self.tensors

    def head(self, level: int) -> HeadParams:
        if not self.has_head(level):
            raise ContractError(f"checkpoint has no head for level {level}")
        p = P.make_params(self.group(f"level{level}.head"))
        return HeadParams(level, p["w"], p["b"], float(self.train_config.get("dropout_p", 0.0)))

    def classes(self, level: int) -> list[str]:
        return list(self.corpus_meta["classes"][str(level)])

    def digest(self) -> str:
        return hashlib.sha256(_manifest_bytes(self) + _blob(self)).hexdigest()


def _corpus_meta(corpus: EncodedCorpus) -> dict:
    return {
        "root": corpus.root,
        "tokenizer": corpus.tokenizer,
        "max_len": corpus.max_len,
        "vocab": corpus.vocab.tokens,
        "vocab_hash": corpus.vocab.digest(),
        "tree_hash": corpus.tree.digest(),
        "classes": {str(lvl): corpus.classes(lvl) for lvl in LEVELS},
    }


def _put(tensors: dict, prefix: str, arrays: dict):
    for k, v in arrays.items():
        tensors[f"{prefix}.{k}"] = np.array(v, dtype=np.float64)


def _make_checkpoint(config: TrainConfig, bcfg, corpus: EncodedCorpus, tensors, level_encoders, histories,
                     rngs: dict) -> Checkpoint:
    return Checkpoint(config.regime, config.backbone, bcfg.to_dict(), config.to_dict(), tensors, level_encoders,
                      histories, {k: r.bit_generator.state for k, r in rngs.items()}, _corpus_meta(corpus))


def _level_tensors(tensors: dict, run: LevelRun, enc_prefix: str | None):
    if enc_prefix is not None:
        _put(tensors, enc_prefix + "_init", run.encoder_init)
        _put(tensors, enc_prefix, P.to_arrays(run.encoder))
    _put(tensors, f"level{run.level}.head", P.to_arrays(run.head.params()))


def run_hft(corpus: EncodedCorpus, config: TrainConfig) -> Checkpoint:
    """Train level 2, then continue from level 2's final encoder at level 3."""
    if config.regime != "hft":
        raise ContractError(f"run_hft needs regime 'hft', got {config.regime!r}")
    bcfg = backbone_config_for(corpus, config)
    encoder = bb.get(config.backbone).init(bcfg, derive_seed(config.seed, _ENC, _JOINT))
    rngs = {str(lvl): np.random.default_rng(derive_seed(config.seed, _TRAIN, lvl)) for lvl in LEVELS}
    tensors: dict[str, np.ndarray] = {}
    histories = {}
    for lvl in LEVELS:
        run = train_level(encoder, corpus, lvl, config, derive_seed(config.seed, _HEAD, lvl), rngs[str(lvl)], bcfg)
        _level_tensors(tensors, run, f"level{lvl}.encoder")
        histories[str(lvl)] = run.history
        encoder = run.encoder
    return _make_checkpoint(config, bcfg, corpus, tensors, {2: "level2.encoder", 3: "level3.encoder"},
                            histories, rngs)


def run_hier(corpus: EncodedCorpus, config: TrainConfig) -> Checkpoint:
    """Independent encoder and head per level; nothing flows between levels."""
    if config.regime != "hier":
        raise ContractError(f"run_hier needs regime 'hier', got {config.regime!r}")
    bcfg = backbone_config_for(corpus, config)
    init = bb.get(config.backbone).init
    rngs = {str(lvl): np.random.default_rng(derive_seed(config.seed, _TRAIN, lvl)) for lvl in LEVELS}
    tensors: dict[str, np.ndarray] = {}
    histories = {}
    for lvl in LEVELS:
        encoder = init(bcfg, derive_seed(config.seed, _ENC, lvl))
        run = train_level(encoder, corpus, lvl, config, derive_seed(config.seed, _HEAD, lvl), rngs[str(lvl)], bcfg)
        _level_tensors(tensors, run, f"level{lvl}.encoder")
        histories[str(lvl)] = run.history
    return _make_checkpoint(config, bcfg, corpus, tensors, {2: "level2.encoder", 3: "level3.encoder"},
                            histories, rngs)


def run_flat(corpus: EncodedCorpus, config: TrainConfig) -> Checkpoint:
    """One shared encoder with a head per level, trained on the summed losses."""
    if config.regime != "flat":
        raise ContractError(f"run_flat needs regime 'flat', got {config.regime!r}")
    bcfg = backbone_config_for(corpus, config)
    encoder = bb.get(config.backbone).init(bcfg, derive_seed(config.seed, _ENC, _JOINT))
    init_snapshot = P.to_arrays(encoder)
    heads = {lvl: init_head(lvl, bcfg.feature_dim, len(corpus.classes(lvl)), derive_seed(config.seed, _HEAD, lvl),
                            config.dropout_p) for lvl in LEVELS}
    rngs = {"joint": np.random.default_rng(derive_seed(config.seed, _TRAIN, _JOINT))}
    history = _fit(encoder, bcfg, heads, corpus, config, rngs["joint"])
    tensors: dict[str, np.ndarray] = {}
    _put(tensors, "joint.encoder_init", init_snapshot)
    _put(tensors, "joint.encoder", P.to_arrays(encoder))
    for lvl, h in heads.items():
        _put(tensors, f"level{lvl}.head", P.to_arrays(h.params()))
    return _make_checkpoint(config, bcfg, corpus, tensors, {2: "joint.encoder", 3: "joint.encoder"},
                            {"joint": history}, rngs)


def run(corpus: EncodedCorpus, config: TrainConfig) -> Checkpoint:
    return {"flat": run_flat, "hier": run_hier, "hft": run_hft}[config.regime](corpus, config)


def _manifest(ckpt: Checkpoint) -> dict:
    entries, offset = [], 0
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return {
        "format": CHECKPOINT_FORMAT,
        "version": ckpt.version,
        "regime": ckpt.regime,
        "backbone": ckpt.backbone,
        "backbone_config": ckpt.backbone_config,
        "train_config": ckpt.train_config,
        "config_hash": ckpt.config_hash,
        "tensors": entries,
        "level_encoders": {str(k): v for k, v in ckpt.level_encoders.items()},
        "histories": ckpt.histories,
        "rng_state": ckpt.rng_state,
        "corpus": ckpt.corpus_meta,
    }


def _manifest_bytes(ckpt: Checkpoint) -> bytes:
    return container.dumps_manifest(_manifest(ckpt))


def _blob(ckpt: Checkpoint) -> bytes:
    return b"".join(np.ascontiguousarray(ckpt.tensors[k], dtype="<f8").tobytes() for k in sorted(ckpt.tensors))


def save_checkpoint(ckpt: Checkpoint, path):
    container.write(path, _manifest(ckpt), _blob(ckpt))


def load_checkpoint(path, backbone_config=None) -> Checkpoint:
    """Read a checkpoint; encoder tensors are validated against the stored (or given) backbone config."""
    m, blob = container.read(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
    try:
        tensors = {}
        for e in m["tensors"]:
            if e["offset"] + e["nbytes"] > len(blob) or e["nbytes"] != 8 * int(np.prod(e["shape"], dtype=np.int64)):
                raise FormatError(f"{path}: tensor {e['name']!r} lies outside the data block")
            arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
            tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
        ckpt = Checkpoint(m["regime"], m["backbone"], m["backbone_config"], m["train_config"], tensors,
                          {int(k): v for k, v in m["level_encoders"].items()}, m["histories"], m["rng_state"],
                          m["corpus"], m["version"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed checkpoint manifest ({exc})") from None

    cfg = backbone_config if backbone_config is not None else ckpt.backbone_cfg()
    expected = bb.get(ckpt.backbone).shapes(cfg)
    for prefix in sorted(set(ckpt.level_encoders.values())):
        for group in (prefix, prefix + "_init"):
            P.check_shapes(ckpt.group(group), expected, f"{path}: {group}")
    for lvl in LEVELS:
        if ckpt.has_head(lvl):
            w = ckpt.tensors[f"level{lvl}.head.w"]
            if w.shape[0] != cfg.feature_dim:
                raise ShapeError(f"{path}: tensor 'level{lvl}.head.w' has input width {w.shape[0]}, "
                                 f"backbone produces {cfg.feature_dim}")
    return ckpt
