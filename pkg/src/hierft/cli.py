"""Command line: prepare, synth, train, evaluate, predict.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import corpus as C
from . import evaluation as E
from . import trainer as T
from .errors import CompatibilityError, ContractError, FormatError, HierftError, ShapeError
from .head import probabilities

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

CHECKPOINT_NAME = "checkpoint.bin"
HISTORY_NAME = "history.csv"
MANIFEST_NAME = "run.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _levels(choice: str) -> list[int]:
    return [2, 3] if choice == "both" else [int(choice)]


def _write_manifest(path: Path, command: str, doc: dict):
    body = {"command": command, "hierft_version": __version__, **doc}
    path.write_text(json.dumps(body, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".run.json")


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(args) -> int:
    records = list(C.load_records(args.input, args.format))
    try:
        corpus = C.prepare_corpus(records, args.root, args.tokenizer, args.max_len, args.split_seed)
    except KeyError as exc:
        raise DataError(exc.args[0]) from None
    out = Path(args.out)
    C.save_corpus(corpus, out)
    _write_manifest(_sidecar(out), "prepare", {
        "args": {"input": args.input, "format": args.format, "root": args.root, "tokenizer": args.tokenizer,
                 "max_len": args.max_len, "split_seed": args.split_seed},
        "seeds": {"split_seed": args.split_seed},
        "artifacts": {"corpus": str(out)},
        "counts": corpus.counts(),
        "vocab_size": len(corpus.vocab),
        "vocab_hash": corpus.vocab.digest(),
        "tree_hash": corpus.tree.digest(),
    })
    print(f"wrote {out}: {len(corpus)} records ({corpus.counts()['train']} train, {corpus.counts()['test']} test), "
          f"vocabulary {len(corpus.vocab)}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = C.SynthSpec.from_json(Path(args.spec).read_text(encoding="utf-8"))
    records = C.synth_corpus(spec, args.seed)
    out = Path(args.out)
    C.write_jsonl(records, out)
    _write_manifest(_sidecar(out), "synth", {
        "args": {"spec": args.spec, "seed": args.seed},
        "seeds": {"seed": args.seed},
        "spec": spec.to_dict(),
        "artifacts": {"records": str(out)},
        "n_records": len(records),
    })
    print(f"wrote {out}: {len(records)} records")
    return EXIT_OK


def _train_config(args) -> T.TrainConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: {exc.msg} at line {exc.lineno} column {exc.colno}") from None
        if not isinstance(doc, dict):
            raise DataError(f"{args.config}: config must be a JSON object")
    for key in ("regime", "backbone", "seed"):
        if getattr(args, key) is not None:
            doc[key] = getattr(args, key)
    try:
        return T.TrainConfig.from_dict(doc)
    except (ContractError, TypeError) as exc:
        raise DataError(f"invalid training config: {exc}") from None


def _write_history(ckpt: T.Checkpoint, path: Path):
    acc_cols = [f"train_acc_level{lvl}" for lvl in T.LEVELS]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "loss", "lr", *acc_cols])
        for stage, hist in ckpt.histories.items():
            for e in hist:
                w.writerow([stage, e["epoch"], repr(e["loss"]), repr(e["lr"]),
                            *(repr(e[c]) if c in e else "" for c in acc_cols)])


def cmd_train(args) -> int:
    config = _train_config(args)
    corpus = C.load_corpus(args.corpus)
    try:
        T.backbone_config_for(corpus, config)
    except (ContractError, TypeError) as exc:
        raise DataError(f"invalid backbone config: {exc}") from None
    ckpt = T.run(corpus, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    T.save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    _write_history(ckpt, out / HISTORY_NAME)
    _write_manifest(out / MANIFEST_NAME, "train", {
        "args": {"corpus": args.corpus, "config": args.config, "regime": args.regime, "backbone": args.backbone,
                 "seed": args.seed},
        "train_config": config.to_dict(),
        "backbone_config": ckpt.backbone_config,
        "config_hash": ckpt.config_hash,
        "seeds": {"seed": config.seed, **{f"{kind}_level{lvl}": T.derive_seed(config.seed, tag, lvl)
                                          for kind, tag in (("encoder", T._ENC), ("head", T._HEAD), ("train", T._TRAIN))
                                          for lvl in T.LEVELS}},
        "artifacts": {"checkpoint": str(out / CHECKPOINT_NAME), "history": str(out / HISTORY_NAME)},
        "checkpoint_hash": ckpt.digest(),
    })
    for stage, hist in ckpt.histories.items():
        if hist:
            last = hist[-1]
            accs = " ".join(f"{k}={v:.4f}" for k, v in last.items() if k.startswith("train_acc"))
            print(f"{stage}: epoch {last['epoch']} loss={last['loss']:.4f} {accs}")
    print(f"wrote {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = T.load_checkpoint(args.checkpoint)
    corpus = C.load_corpus(args.corpus)
    levels = _levels(args.level)
    report = E.evaluate_report(ckpt, corpus, levels)
    written = E.write_report(report, args.report, args.confusion)
    _write_manifest(_sidecar(Path(args.report)), "evaluate", {
        "args": {"checkpoint": args.checkpoint, "corpus": args.corpus, "level": args.level, "report": args.report,
                 "confusion": args.confusion},
        "seeds": {},
        "artifacts": {"files": [str(p) for p in written]},
        "checkpoint_hash": report.metadata["checkpoint_hash"],
    })
    for lvl in levels:
        print(f"level{lvl} accuracy={report.levels[lvl].accuracy:.6f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = T.load_checkpoint(args.checkpoint)
    meta = ckpt.corpus_meta
    text = C.clean_text(args.text)
    if not text:
        raise DataError("text is empty after cleaning")
    ids, mask = C.encode(C.tokenize(text, meta["tokenizer"]), C.Vocabulary(meta["vocab"]), meta["max_len"])
    for lvl in _levels(args.level):
        probs = probabilities(E.level_logits(ckpt, ids[None], mask[None], lvl))[0]
        k = int(np.argmax(probs))
        print(f"level{lvl}\t{ckpt.classes(lvl)[k]}\t{probs[k]:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hierft", description="Hierarchical fine-tuning text classifiers over a 3-level label tree.")
    p.add_argument("--version", action="version", version=f"hierft {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="encode one level-1 subtree into a corpus file")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=("jsonl", "tsv"), default="jsonl")
    s.add_argument("--root", required=True, help="level-1 category name")
    s.add_argument("--tokenizer", choices=C.TOKENIZERS, default="char")
    s.add_argument("--max-len", type=_positive_int, default=30)
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synth", help="generate a synthetic JSONL corpus from a spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train under a regime and backbone")
    s.add_argument("--corpus", required=True)
    s.add_argument("--regime", choices=T.REGIMES)
    s.add_argument("--backbone", choices=("transformer", "cnn"))
    s.add_argument("--config", help="JSON file with TrainConfig fields")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="accuracy and confusion matrices on the test split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--level", choices=("2", "3", "both"), default="both")
    s.add_argument("--report", required=True)
    s.add_argument("--confusion")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="classify one text")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--level", choices=("2", "3", "both"), default="both")
    s.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"hierft: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (DataError, FormatError, CompatibilityError, ShapeError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"hierft {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (HierftError, OSError, ValueError) as exc:
        print(f"hierft {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"hierft {args.command}: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
