"""Per-level accuracy, confusion matrices and report files.

Each level is measured independently: level-3 predictions are not conditioned on
a correct level-2 prediction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as bb
from .corpus import EncodedCorpus
from .errors import CompatibilityError, ContractError
from .head import head_forward, predict
from .trainer import Checkpoint

REPORT_VERSION = 1

_PROBS = {"type": "array", "items": {"type": ["number", "null"], "minimum": 0, "maximum": 1}}
_LEVEL_SCHEMA = {
    "type": "object",
    "required": ["level", "classes", "n", "accuracy", "confusion", "support", "recall", "precision"],
    "additionalProperties": False,
    "properties": {
        "level": {"enum": [2, 3]},
        "classes": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "n": {"type": "integer", "minimum": 1},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "support": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "recall": _PROBS,
        "precision": _PROBS,
    },
}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "hierft evaluation report",
    "type": "object",
    "required": ["version", "metadata", "levels"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": REPORT_VERSION},
        "metadata": {
            "type": "object",
            "required": ["regime", "backbone", "split", "checkpoint_hash", "config_hash", "corpus"],
            "properties": {
                "regime": {"enum": ["flat", "hier", "hft"]},
                "backbone": {"enum": ["transformer", "cnn"]},
                "split": {"enum": ["train", "test", "all"]},
                "checkpoint_hash": {"type": "string"},
                "config_hash": {"type": "string"},
                "corpus": {
                    "type": "object",
                    "required": ["root", "vocab_hash", "tree_hash", "n_records"],
                    "properties": {
                        "root": {"type": "string"},
                        "vocab_hash": {"type": "string"},
                        "tree_hash": {"type": "string"},
                        "n_records": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
        "levels": {"type": "object", "patternProperties": {"^[23]$": _LEVEL_SCHEMA},
                   "additionalProperties": False, "minProperties": 1},
    },
}


# ---------------------------------------------------------------------------
# matrix arithmetic


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with rows = true class and columns = predicted class."""
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return m


def accuracy_of(matrix) -> float:
    m = np.asarray(matrix)
    total = m.sum()
    return float(np.trace(m) / total) if total else 0.0


def recall_of(matrix) -> list[float | None]:
    m = np.asarray(matrix)
    rows = m.sum(axis=1)
    return [float(m[c, c] / rows[c]) if rows[c] else None for c in range(len(m))]


def precision_of(matrix) -> list[float | None]:
    m = np.asarray(matrix)
    cols = m.sum(axis=0)
    return [float(m[c, c] / cols[c]) if cols[c] else None for c in range(len(m))]


def confusion_row_normalize(matrix) -> np.ndarray:
    """Divide each nonzero row by its sum; all-zero rows stay zero."""
    m = np.asarray(matrix, dtype=np.float64)
    rows = m.sum(axis=1, keepdims=True)
    return np.divide(m, rows, out=np.zeros_like(m), where=rows != 0)


# ---------------------------------------------------------------------------
# reports


@dataclass
class LevelReport:
    level: int
    classes: list[str]
    confusion: np.ndarray

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return accuracy_of(self.confusion)

    @property
    def support(self) -> list[int]:
        return [int(s) for s in self.confusion.sum(axis=1)]

    @property
    def recall(self):
        return recall_of(self.confusion)

    @property
    def precision(self):
        return precision_of(self.confusion)

    def to_dict(self) -> dict:
        return {"level": self.level, "classes": list(self.classes), "n": self.n, "accuracy": self.accuracy,
                "confusion": self.confusion.tolist(), "support": self.support, "recall": self.recall,
                "precision": self.precision}

    @classmethod
    def from_dict(cls, doc: dict) -> "LevelReport":
        return cls(int(doc["level"]), list(doc["classes"]), np.array(doc["confusion"], dtype=np.int64))

    def __eq__(self, other):
        return (isinstance(other, LevelReport) and self.level == other.level and self.classes == other.classes
                and np.array_equal(self.confusion, other.confusion))


@dataclass
class EvalReport:
    metadata: dict
    levels: dict[int, LevelReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"version": REPORT_VERSION, "metadata": self.metadata,
                "levels": {str(k): v.to_dict() for k, v in sorted(self.levels.items())}}

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(doc["metadata"], {int(k): LevelReport.from_dict(v) for k, v in doc["levels"].items()})


def check_compatible(ckpt: Checkpoint, corpus: EncodedCorpus):
    meta = ckpt.corpus_meta
    problems = []
    if meta["vocab_hash"] != corpus.vocab.digest():
        problems.append("vocabulary")
    if meta["tree_hash"] != corpus.tree.digest():
        problems.append("label tree")
    if problems:
        raise CompatibilityError(
            f"corpus {' and '.join(problems)} differ from the ones the checkpoint was trained on "
            f"(checkpoint root {meta['root']!r}, vocab {meta['vocab_hash'][:12]}; "
            f"corpus root {corpus.root!r}, vocab {corpus.vocab.digest()[:12]}). "
            "Evaluate with the corpus file produced by the same prepare run.")


def level_logits(ckpt: Checkpoint, token_ids, mask, level: int, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits in fixed batch order. Works on fresh copies of the stored tensors."""
    head = ckpt.head(level)
    encoder = ckpt.encoder(level)
    cfg = ckpt.backbone_cfg()
    forward = bb.get(ckpt.backbone).forward
    out = []
    for start in range(0, len(token_ids), batch_size):
        feats = forward(encoder, cfg, token_ids[start:start + batch_size], mask[start:start + batch_size])
        out.append(head_forward(head, feats).data)
    return np.concatenate(out) if out else np.zeros((0, head.num_classes))


def evaluate(ckpt: Checkpoint, corpus: EncodedCorpus, level: int, split: str = "test",
             batch_size: int = 256) -> LevelReport:
    if not ckpt.has_head(level):
        raise ContractError(f"checkpoint has no head for level {level}")
    check_compatible(ckpt, corpus)
    rows = corpus.subset(split)
    if len(rows) == 0:
        raise ContractError(f"the corpus {split} split is empty")
    logits = level_logits(ckpt, corpus.token_ids[rows], corpus.mask[rows], level, batch_size)
    classes = corpus.classes(level)
    return LevelReport(level, classes, confusion_matrix(corpus.labels(level)[rows], predict(logits), len(classes)))


def evaluate_report(ckpt: Checkpoint, corpus: EncodedCorpus, levels=(2, 3), split: str = "test") -> EvalReport:
    meta = {
        "regime": ckpt.regime,
        "backbone": ckpt.backbone,
        "split": split,
        "checkpoint_hash": ckpt.digest(),
        "config_hash": ckpt.config_hash,
        "corpus": {"root": corpus.root, "vocab_hash": corpus.vocab.digest(), "tree_hash": corpus.tree.digest(),
                   "n_records": len(corpus)},
    }
    return EvalReport(meta, {lvl: evaluate(ckpt, corpus, lvl, split) for lvl in levels})


def confusion_paths(csv_path, levels) -> dict[int, Path]:
    """One CSV per level; with several levels the level number is added to the file stem."""
    p = Path(csv_path)
    levels = sorted(levels)
    if len(levels) == 1:
        return {levels[0]: p}
    return {lvl: p.with_name(f"{p.stem}_level{lvl}{p.suffix}") for lvl in levels}


def write_confusion_csv(level: LevelReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\predicted", *level.classes])
        for name, row in zip(level.classes, level.confusion.tolist()):
            w.writerow([name, *row])


def write_report(report: EvalReport, json_path, csv_path=None) -> list[Path]:
    written = []
    try:
        Path(json_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                                   encoding="utf-8")
        written.append(Path(json_path))
        if csv_path is not None:
            for lvl, p in confusion_paths(csv_path, report.levels).items():
                write_confusion_csv(report.levels[lvl], p)
                written.append(p)
    except OSError as exc:
        raise OSError(f"cannot write report file {exc.filename}: {exc.strerror}") from exc
    return written


def load_report(json_path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(json_path).read_text(encoding="utf-8")))
