"""Record ingestion, text cleaning, vocabularies, encoding, splitting and synthetic corpora."""

from __future__ import annotations

import hashlib
import json
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import container
from .errors import FormatError, SchemaError
from .label_tree import LabelTree, build_tree, classes_at, qualify

PAD, UNK, CLS = "<pad>", "<unk>", "<cls>"
RESERVED = (PAD, UNK, CLS)
PAD_ID, UNK_ID, CLS_ID = 0, 1, 2

TOKENIZERS = ("char", "whitespace")
CORPUS_FORMAT = "hierft-corpus"
CORPUS_VERSION = 1


@dataclass(frozen=True)
class RawRecord:
    title: str
    cat1: str
    cat2: str
    cat3: str
    line: int = field(default=0, compare=False)

    @property
    def categories(self) -> tuple[str, str, str]:
        return (self.cat1, self.cat2, self.cat3)


# ---------------------------------------------------------------------------
# loading

_FIELDS = ("title", "cat1", "cat2", "cat3")


def _from_jsonl(line: str, lineno: int) -> RawRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"line {lineno}: invalid JSON ({exc.msg} at column {exc.colno})") from None
    if not isinstance(obj, dict):
        raise SchemaError(f"line {lineno}: expected a JSON object")
    missing = [k for k in _FIELDS if k not in obj]
    if missing:
        raise SchemaError(f"line {lineno}: missing field(s) {', '.join(missing)}")
    values = [obj[k] for k in _FIELDS]
    desc = obj.get("description")
    if not all(isinstance(v, str) for v in values) or not isinstance(desc, (str, type(None))):
        raise SchemaError(f"line {lineno}: fields must be strings")
    title = values[0] if not desc else f"{values[0]} {desc}"
    return RawRecord(title, *values[1:], line=lineno)


def _from_tsv(line: str, lineno: int) -> RawRecord:
    cols = line.split("\t")
    if len(cols) not in (4, 5):
        raise SchemaError(f"line {lineno}: expected 4 tab-separated fields (title, cat1, cat2, cat3), got {len(cols)}")
    title = cols[0] if len(cols) == 4 or not cols[4] else f"{cols[0]} {cols[4]}"
    return RawRecord(title, cols[1], cols[2], cols[3], line=lineno)


def load_records(path, fmt: str = "jsonl") -> Iterator[RawRecord]:
    """Yield records in file order.

    JSONL objects carry ``title``, ``cat1``, ``cat2``, ``cat3`` and optionally
    ``description``; TSV rows carry the same columns, description fifth. A description
    is appended to the title with one space (book records).
    """
    parse = {"jsonl": _from_jsonl, "tsv": _from_tsv}.get(fmt)
    if parse is None:
        raise ValueError(f"unknown record format {fmt!r}; expected jsonl or tsv")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            yield parse(line, lineno)


# ---------------------------------------------------------------------------
# text


def clean_text(s: str) -> str:
    """Drop Unicode punctuation (P*) and symbols (S*), collapse whitespace, trim."""
    out = [" " if unicodedata.category(ch)[0] in "PS" else ch for ch in s]
    return " ".join("".join(out).split())


def tokenize(s: str, mode: str = "char") -> list[str]:
    if mode == "char":
        return [ch for ch in s if not ch.isspace()]
    if mode == "whitespace":
        return s.split()
    raise ValueError(f"unknown tokenizer mode {mode!r}; expected one of {TOKENIZERS}")


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED:
            raise FormatError(f"vocabulary must start with {RESERVED}")
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise FormatError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._ids

    def id_of(self, token: str) -> int:
        if token in RESERVED:
            return UNK_ID
        return self._ids.get(token, UNK_ID)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 1) -> Vocabulary:
    """Vocabulary over tokenized training texts, most frequent first, ties lexicographic."""
    if min_freq < 1:
        raise ValueError("min_freq must be at least 1")
    counts = Counter(t for toks in corpus for t in toks if t not in RESERVED)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


def encode(tokens: Sequence[str], vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """``<cls>`` + the first ``max_len`` token ids, padded to ``max_len + 1``, with attention mask."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    kept = tokens[:max_len]
    ids = np.full(max_len + 1, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1:len(kept) + 1] = [vocab.id_of(t) for t in kept]
    mask = np.zeros(max_len + 1, dtype=np.uint8)
    mask[:len(kept) + 1] = 1
    return ids, mask


def decode(ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    return [vocab.tokens[i] for i in ids if i not in (PAD_ID, CLS_ID)]


# ---------------------------------------------------------------------------
# splitting


def train_size(n: int, train_fraction: float = 0.8) -> int:
    frac = Fraction(train_fraction).limit_denominator(10_000)
    return math.ceil(n * frac)


def split(records: Sequence, train_fraction: float = 0.8, seed: int = 0) -> list[tuple[object, str]]:
    """Tag each record ``train`` or ``test``, keeping input order.

    A seeded permutation ranks the records; the first ``ceil(fraction * n)`` of that
    ranking are training records.
    """
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    is_train = np.zeros(n, dtype=bool)
    is_train[order[:train_size(n, train_fraction)]] = True
    return [(r, "train" if t else "test") for r, t in zip(records, is_train)]


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass
class SynthChild:
    name: str
    pool: list[str]


@dataclass
class SynthParent:
    name: str
    pool: list[str]
    children: list[SynthChild]


@dataclass
class SynthRoot:
    name: str
    parents: list[SynthParent]


@dataclass
class SynthSpec:
    """Generator description: token pools per level-2 and level-3 class.

    ``mixing_ratio`` is the probability that a title token comes from the parent pool;
    otherwise it is drawn from the leaf's own pool.
    """

    roots: list[SynthRoot]
    records_per_leaf: int = 10
    length: tuple[int, int] = (6, 10)
    mixing_ratio: float = 0.5

    def validate(self):
        if self.records_per_leaf < 0:
            raise FormatError("records_per_leaf must be non-negative")
        lo, hi = self.length
        if not 1 <= lo <= hi:
            raise FormatError(f"length range {self.length} must satisfy 1 <= min <= max")
        if not 0.0 <= self.mixing_ratio <= 1.0:
            raise FormatError("mixing_ratio must lie in [0, 1]")
        for root in self.roots:
            for parent in root.parents:
                if not parent.pool and self.mixing_ratio > 0:
                    raise FormatError(f"parent {parent.name!r} has an empty token pool")
                owner: dict[str, str] = {}
                for child in parent.children:
                    if not child.pool and self.mixing_ratio < 1:
                        raise FormatError(f"child {child.name!r} has an empty token pool")
                    for tok in child.pool:
                        if tok in owner and owner[tok] != child.name:
                            raise FormatError(
                                f"token {tok!r} is shared by children {owner[tok]!r} and {child.name!r} "
                                f"of parent {parent.name!r}; child pools must be disjoint")
                        owner[tok] = child.name

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        try:
            roots = [SynthRoot(r["name"], [
                SynthParent(p["name"], list(p.get("pool", [])),
                            [SynthChild(c["name"], list(c.get("pool", []))) for c in p["children"]])
                for p in r["parents"]]) for r in doc["roots"]]
            spec = cls(roots, int(doc.get("records_per_leaf", 10)), tuple(doc.get("length", (6, 10))),
                       float(doc.get("mixing_ratio", 0.5)))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"synthetic spec: missing or invalid field {exc}") from None
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"synthetic spec: {exc.msg} at line {exc.lineno} column {exc.colno}") from None
        if not isinstance(doc, dict):
            raise SchemaError("synthetic spec must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "roots": [{"name": r.name, "parents": [
                {"name": p.name, "pool": p.pool, "children": [{"name": c.name, "pool": c.pool} for c in p.children]}
                for p in r.parents]} for r in self.roots],
            "records_per_leaf": self.records_per_leaf,
            "length": list(self.length),
            "mixing_ratio": self.mixing_ratio,
        }


def make_synth_spec(n_parents: int, n_children: int, records_per_leaf: int, mixing_ratio: float,
                    pool_size: int = 6, length=(6, 10), n_roots: int = 1) -> SynthSpec:
    """Regular spec with disjoint pools of made-up tokens, e.g. ``r0p1`` / ``r0p1c2``."""
    roots = []
    for r in range(n_roots):
        parents = []
        for p in range(n_parents):
            tag = f"r{r}p{p}"
            children = [SynthChild(f"child {c}", [f"{tag}c{c}w{i}" for i in range(pool_size)])
                        for c in range(n_children)]
            parents.append(SynthParent(f"parent {p}", [f"{tag}w{i}" for i in range(pool_size)], children))
        roots.append(SynthRoot(f"root {r}", parents))
    spec = SynthSpec(roots, records_per_leaf, tuple(length), mixing_ratio)
    spec.validate()
    return spec


def synth_corpus(spec: SynthSpec, seed: int = 0) -> list[RawRecord]:
    spec.validate()
    rng = np.random.default_rng(seed)
    lo, hi = spec.length
    out = []
    for root in spec.roots:
        for parent in root.parents:
            for child in parent.children:
                for _ in range(spec.records_per_leaf):
                    k = int(rng.integers(lo, hi + 1))
                    from_parent = rng.random(k) < spec.mixing_ratio
                    words = [parent.pool[rng.integers(len(parent.pool))] if fp
                             else child.pool[rng.integers(len(child.pool))] for fp in from_parent]
                    out.append(RawRecord(" ".join(words), root.name, parent.name, child.name, line=len(out) + 1))
    return out


def write_jsonl(records: Iterable[RawRecord], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps({"title": r.title, "cat1": r.cat1, "cat2": r.cat2, "cat3": r.cat3},
                                ensure_ascii=False, sort_keys=True) + "\n")


def write_tsv(records: Iterable[RawRecord], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write("\t".join([r.title, r.cat1, r.cat2, r.cat3]) + "\n")


# ---------------------------------------------------------------------------
# encoded corpora


@dataclass
class EncodedCorpus:
    token_ids: np.ndarray      # [N, max_len + 1] int64
    mask: np.ndarray           # [N, max_len + 1] uint8
    label2: np.ndarray         # [N] int64
    label3: np.ndarray         # [N] int64
    is_train: np.ndarray       # [N] bool
    vocab: Vocabulary
    tree: LabelTree
    root: str
    tokenizer: str
    max_len: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.label2)

    def classes(self, level: int) -> list[str]:
        return classes_at(self.tree, level, self.tree.root_by_name(self.root).id)

    def labels(self, level: int) -> np.ndarray:
        if level == 2:
            return self.label2
        if level == 3:
            return self.label3
        raise ValueError(f"level must be 2 or 3, got {level}")

    def subset(self, which: str) -> np.ndarray:
        """Row indices of the ``train``, ``test`` or ``all`` split."""
        if which == "train":
            return np.flatnonzero(self.is_train)
        if which == "test":
            return np.flatnonzero(~self.is_train)
        if which == "all":
            return np.arange(len(self))
        raise ValueError(f"unknown split {which!r}")

    def encode_text(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        return encode(tokenize(clean_text(text), self.tokenizer), self.vocab, self.max_len)

    def counts(self) -> dict:
        return {"train": int(self.is_train.sum()), "test": int((~self.is_train).sum())}


def available_roots(records: Iterable[RawRecord]) -> list[str]:
    return sorted({r.cat1.strip() for r in records})


def prepare_corpus(records: Sequence[RawRecord], root: str, tokenizer: str = "char", max_len: int = 30,
                   split_seed: int = 0, train_fraction: float = 0.8, min_freq: int = 1) -> EncodedCorpus:
    """Filter to one level-1 category, clean, split, build the vocabulary on train, encode."""
    if tokenizer not in TOKENIZERS:
        raise ValueError(f"unknown tokenizer {tokenizer!r}; expected one of {TOKENIZERS}")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    subset = [r for r in records if r.cat1.strip() == root]
    if not subset:
        raise KeyError(f"no records under level-1 category {root!r}; available: {', '.join(available_roots(records))}")

    tree = build_tree(r.categories for r in subset)
    root_id = tree.root_by_name(root).id
    index2 = {name: i for i, name in enumerate(classes_at(tree, 2, root_id))}
    index3 = {name: i for i, name in enumerate(classes_at(tree, 3, root_id))}

    texts = []
    for r in subset:
        text = clean_text(r.title)
        if not text:
            raise SchemaError(f"line {r.line}: title is empty after cleaning")
        texts.append(tokenize(text, tokenizer))

    tagged = split(list(range(len(subset))), train_fraction, split_seed)
    is_train = np.array([tag == "train" for _, tag in tagged], dtype=bool)
    vocab = build_vocab((texts[i] for i in np.flatnonzero(is_train)), min_freq)

    n, width = len(subset), max_len + 1
    ids = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=np.uint8)
    label2 = np.zeros(n, dtype=np.int64)
    label3 = np.zeros(n, dtype=np.int64)
    for i, (r, toks) in enumerate(zip(subset, texts)):
        ids[i], mask[i] = encode(toks, vocab, max_len)
        cat2, cat3 = r.cat2.strip(), r.cat3.strip()
        label2[i] = index2[cat2]
        label3[i] = index3[qualify(cat2, cat3)]
    meta = {"split_seed": split_seed, "train_fraction": train_fraction, "min_freq": min_freq}
    return EncodedCorpus(ids, mask, label2, label3, is_train, vocab, tree, root, tokenizer, max_len, meta)


def _record_dtype(width: int) -> np.dtype:
    return np.dtype([("token_ids", "<u4", (width,)), ("label2", "<u4"), ("label3", "<u4"),
                     ("mask", "u1", (width,)), ("split", "u1")])


def save_corpus(corpus: EncodedCorpus, path):
    width = corpus.max_len + 1
    block = np.zeros(len(corpus), dtype=_record_dtype(width))
    block["token_ids"] = corpus.token_ids
    block["label2"] = corpus.label2
    block["label3"] = corpus.label3
    block["mask"] = corpus.mask
    block["split"] = np.where(corpus.is_train, 0, 1)
    manifest = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "root": corpus.root,
        "tokenizer": corpus.tokenizer,
        "max_len": corpus.max_len,
        "vocab": corpus.vocab.tokens,
        "vocab_hash": corpus.vocab.digest(),
        "tree": json.loads(corpus.tree.to_json()),
        "tree_hash": corpus.tree.digest(),
        "counts": corpus.counts(),
        "n_records": len(corpus),
        "record_bytes": block.dtype.itemsize,
        "meta": corpus.meta,
    }
    container.write(path, manifest, block.tobytes())


def load_corpus(path) -> EncodedCorpus:
    m, payload = container.read(path, CORPUS_FORMAT, CORPUS_VERSION)
    try:
        width = int(m["max_len"]) + 1
        dtype = _record_dtype(width)
        if dtype.itemsize * m["n_records"] != len(payload):
            raise FormatError(f"{path}: record block size disagrees with {m['n_records']} records")
        block = np.frombuffer(payload, dtype=dtype)
        vocab = Vocabulary(list(m["vocab"]))
        tree = LabelTree.from_json(json.dumps(m["tree"], ensure_ascii=False))
        corpus = EncodedCorpus(block["token_ids"].astype(np.int64), block["mask"].copy(),
                               block["label2"].astype(np.int64), block["label3"].astype(np.int64),
                               block["split"] == 0, vocab, tree, m["root"], m["tokenizer"], int(m["max_len"]),
                               dict(m.get("meta", {})))
    except KeyError as exc:
        raise FormatError(f"{path}: corpus manifest lacks {exc}") from None
    if vocab.digest() != m["vocab_hash"] or tree.digest() != m["tree_hash"]:
        raise FormatError(f"{path}: vocabulary or tree hash does not match its contents")
    return corpus
