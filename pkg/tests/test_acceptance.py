"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line."""

import csv
import json
import math
import time

import numpy as np
import pytest
from appendix import ROWS
from conftest import toy_config, toy_corpus

from hierft import backbone as bb
from hierft import corpus as C
from hierft import evaluation as E
from hierft import numeric as nm
from hierft import params as P
from hierft import trainer as T
from hierft.cli import main
from hierft.encoder_cnn import CnnConfig, encode_batch_cnn, init_cnn
from hierft.encoder_transformer import TransformerConfig, encode_batch, init_encoder
from hierft.head import head_forward, init_head
from hierft.label_tree import build_tree
from hierft.numeric import Tensor


@pytest.fixture
def verdict(capsys):
    def record(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return record


# 1. gradients -------------------------------------------------------------------------


def _op_cases(rng):
    r = lambda *s: Tensor(rng.standard_normal(s))
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]])
    ids = np.array([[0, 3, 3, 1], [4, 2, 0, 0]])
    w4 = Tensor(rng.standard_normal((2, 4, 3)))
    w2, w6 = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 4, 6)))
    return {
        "add": (lambda a, b: nm.sum(nm.mul(nm.add(a, b), w4)), [r(2, 4, 3), r(4, 3)]),
        "neg": (lambda a: nm.sum(nm.mul(nm.neg(a), w4)), [r(2, 4, 3)]),
        "mul": (lambda a, b: nm.sum(nm.mul(a, b)), [r(2, 4, 3), r(3)]),
        "scale": (lambda a: nm.sum(nm.mul(nm.scale(a, 2.5), w4)), [r(2, 4, 3)]),
        "relu": (lambda a: nm.sum(nm.mul(nm.relu(a), w4)), [r(2, 4, 3)]),
        "gelu": (lambda a: nm.sum(nm.mul(nm.gelu(a), w4)), [Tensor(0.5 * rng.standard_normal((2, 4, 3)))]),
        "reshape": (lambda a: nm.sum(nm.mul(nm.reshape(a, (2, 4, 3)), w4)), [r(8, 3)]),
        "transpose": (lambda a: nm.sum(nm.mul(nm.transpose(a, (0, 2, 1)), w4)), [r(2, 3, 4)]),
        "index": (lambda a: nm.sum(nm.mul(nm.index(a, (slice(None), 0)), w2)), [r(2, 4, 3)]),
        "concat": (lambda a, b: nm.sum(nm.mul(nm.concat([a, b], axis=1), w4)), [r(2, 1, 3), r(2, 3, 3)]),
        "embedding": (lambda t: nm.sum(nm.mul(nm.embedding(t, ids), w4)), [r(5, 3)]),
        "unfold": (lambda x: nm.sum(nm.mul(nm.unfold(x, 2), w6)), [r(2, 4, 3)]),
        "sum": (lambda a: nm.sum(a), [r(3, 2)]),
        "mean": (lambda a: nm.mean(nm.mul(a, a)), [r(3, 2)]),
        "matmul": (lambda a, b: nm.sum(nm.mul(nm.matmul(a, b), w4)), [r(2, 4, 5), r(2, 5, 3)]),
        "linear": (lambda x, w, b: nm.sum(nm.mul(nm.linear(x, w, b), w4)), [r(2, 4, 5), r(5, 3), r(3)]),
        "masked_max": (lambda x: nm.sum(nm.mul(nm.masked_max(x, mask), w2)), [r(2, 4, 3)]),
        "softmax": (lambda a: nm.sum(nm.mul(nm.softmax(a), w4)), [r(2, 4, 3)]),
        "cross_entropy": (lambda z: nm.cross_entropy(z, [0, 2, 1, 1]), [r(4, 3)]),
        "layer_norm": (lambda x, g, b: nm.sum(nm.mul(nm.layer_norm(x, g, b), w4)), [r(2, 4, 3), r(3), r(3)]),
        "dropout": (lambda a: nm.sum(nm.mul(nm.dropout(a, 0.3, True, np.random.default_rng(5)), w4)), [r(2, 4, 3)]),
    }


def _end_to_end(name):
    rng = np.random.default_rng(21)
    ids = np.array([[2, 5, 7, 9, 0, 0], [2, 11, 3, 0, 0, 0]])
    mask = (ids != 0).astype(np.uint8)
    if name == "transformer":
        cfg = TransformerConfig(vocab_size=20, d_model=8, n_layers=1, n_heads=2, max_positions=6)
        enc, fwd = init_encoder(cfg, 0), encode_batch
    else:
        cfg = CnnConfig(vocab_size=20, embed_dim=8, kernel_widths=[2, 3, 4], filters_per_width=3)
        enc, fwd = init_cnn(cfg, 0), encode_batch_cnn
    for t in enc.values():  # unit-scale weights keep every true gradient above finite-difference noise
        t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    head = init_head(2, cfg.feature_dim, 3, seed=1)
    head.w.data = rng.standard_normal(head.w.shape)
    names = list(enc)

    def f(*ts):
        head.w, head.b = ts[-2], ts[-1]
        return nm.cross_entropy(head_forward(head, fwd(dict(zip(names, ts[:-2])), cfg, ids, mask)), [0, 2])

    return nm.grad_check(f, [enc[k] for k in names] + [head.w, head.b])


def _corrupted_relu(a):
    on = a.data > 0
    return nm._result(np.where(on, a.data, 0.0), (a,), lambda g: nm._accumulate(a, -g * on))


def test_gradient_suite(verdict):
    start = time.perf_counter()
    errs = {k: nm.grad_check(f, xs) for k, (f, xs) in _op_cases(np.random.default_rng(0)).items()}
    errs.update({f"end_to_end_{b}": _end_to_end(b) for b in bb.BACKBONES})
    x = Tensor(np.abs(np.random.default_rng(6).standard_normal((3, 4))) + 0.1)
    w = Tensor(np.random.default_rng(7).standard_normal((3, 4)))
    mutant = nm.grad_check(lambda x: nm.sum(nm.mul(_corrupted_relu(x), w)), [x])
    elapsed = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= 1e-4 and mutant > 1e-4 and elapsed < 60
    verdict("gradient suite", ok, f"{len(errs)} checks, worst {worst}={errs[worst]:.2e}, "
                                  f"mutant err={mutant:.2f}, {elapsed:.1f}s")


# 2. normalization ---------------------------------------------------------------------------


def test_normalization_stability(verdict):
    rng = np.random.default_rng(1)
    worst_sum = 0.0
    for scale in (1.0, 1e2, 1e3):
        z = rng.standard_normal((64, 85)) * scale
        z[0, :] = 1e3
        z[1, :] = -1e3
        p = nm.softmax(Tensor(z)).data
        worst_sum = max(worst_sum, np.abs(p.sum(axis=1) - 1).max())
    ce_err = max(abs(nm.cross_entropy(Tensor(np.zeros((4, c))), [0, 1, 0, c - 1]).item() - math.log(c))
                 for c in (2, 7, 85))
    ok = worst_sum <= 1e-12 and ce_err <= 1e-10
    verdict("normalization/stability", ok, f"max |row sum - 1| = {worst_sum:.1e}, max |CE - ln C| = {ce_err:.1e}")


# 3. transfer invariant -----------------------------------------------------------------------


def test_transfer_invariant(verdict, tmp_path):
    corpus = toy_corpus()
    T.save_checkpoint(T.run_hft(corpus, toy_config("hft", epochs=3)), tmp_path / "hft.bin")
    hft = T.load_checkpoint(tmp_path / "hft.bin")
    l2, l3_init = hft.group("level2.encoder"), hft.encoder_init(3)
    transfer = set(l2) == set(l3_init) and all(l2[k].tobytes() == l3_init[k].tobytes() for k in l2)

    hier = T.run_hier(corpus, toy_config("hier", epochs=0))
    distinct = hier.encoder_init(2)["tok_emb"].tobytes() != hier.encoder_init(3)["tok_emb"].tobytes()

    isolated = True
    for regime in T.REGIMES:
        ck = T.run(corpus, toy_config(regime, epochs=1))
        snap = {k: v.copy() for k, v in ck.tensors.items()}
        for lvl in (2, 3):
            h = ck.head(lvl)
            h.w.data += 5.0
            h.b.data[...] = -1.0
        isolated &= all(ck.tensors[k].tobytes() == snap[k].tobytes() for k in snap)
        isolated &= not np.shares_memory(ck.head(2).w.data, ck.head(3).w.data)
    verdict("transfer invariant", transfer and distinct and isolated,
            f"hft level-3 init == level-2 final: {transfer}; hier inits differ: {distinct}; heads isolated: {isolated}")


# 4. overfit capacity ---------------------------------------------------------------------------


@pytest.mark.parametrize("backbone", bb.BACKBONES)
def test_overfit_capacity(verdict, backbone):
    corpus = toy_corpus(n_parents=2, n_children=2, per_leaf=8, train_fraction=1.0)
    start = time.perf_counter()
    ck = T.run_hft(corpus, toy_config("hft", backbone, epochs=100))
    elapsed = time.perf_counter() - start
    accs = [E.evaluate(ck, corpus, lvl, split="train").accuracy for lvl in (2, 3)]
    ok = len(corpus) == 32 and accs == [1.0, 1.0] and elapsed < 120
    verdict(f"overfit capacity ({backbone})", ok,
            f"{len(corpus)} examples, 100 epochs/level, train acc L2={accs[0]:.3f} L3={accs[1]:.3f}, {elapsed:.1f}s")


# 5. schedule ---------------------------------------------------------------------------------


def test_schedule(verdict):
    exact = (T.lr_at(0, 1000, 1e-3, 0.0) == 1e-3 and T.lr_at(500, 1000, 1e-3, 0.0) == 5e-4
             and T.lr_at(1000, 1000, 1e-3, 0.0) == 0.0)
    lrs = [T.lr_at(s, 1000, 1e-3, 1e-5) for s in range(1001)]
    monotone = all(a >= b for a, b in zip(lrs, lrs[1:])) and lrs[0] == 1e-3 and lrs[-1] == 1e-5
    verdict("schedule", exact and monotone, f"endpoints/midpoint exact: {exact}; monotone over 1000 steps: {monotone}")


# 6. pipeline determinism -------------------------------------------------------------------------


def _pipeline(root):
    root.mkdir()
    spec = C.make_synth_spec(2, 3, 12, 0.5).to_dict()
    (root / "spec.json").write_text(json.dumps(spec))
    (root / "cfg.json").write_text(json.dumps({"epochs_per_level": 3, "batch_size": 16,
                                               "backbone_config": {"d_model": 8, "n_layers": 1, "n_heads": 2}}))
    steps = [
        ["synth", "--spec", "spec.json", "--seed", "7", "--out", "records.jsonl"],
        ["prepare", "--input", "records.jsonl", "--root", "root 0", "--tokenizer", "whitespace", "--out", "corpus.bin"],
        ["train", "--corpus", "corpus.bin", "--regime", "hft", "--backbone", "transformer", "--config", "cfg.json",
         "--seed", "3", "--out", "run"],
        ["evaluate", "--checkpoint", "run/checkpoint.bin", "--corpus", "corpus.bin", "--report", "report.json",
         "--confusion", "confusion.csv"],
    ]
    codes = []
    for argv in steps:
        argv = [str(root / a) if a.endswith((".json", ".jsonl", ".bin", ".csv")) or a == "run" else a for a in argv]
        codes.append(main(argv))
    return codes


def test_pipeline_determinism(verdict, tmp_path, capsys):
    codes = _pipeline(tmp_path / "a") + _pipeline(tmp_path / "b")
    artifacts = ["records.jsonl", "corpus.bin", "run/checkpoint.bin", "run/history.csv", "report.json",
                 "confusion_level2.csv", "confusion_level3.csv"]
    same = {a: (tmp_path / "a" / a).read_bytes() == (tmp_path / "b" / a).read_bytes() for a in artifacts}
    verdict("pipeline determinism", codes == [0] * 8 and all(same.values()),
            f"exit codes {codes}; identical: {', '.join(a for a, s in same.items() if s)}")


# 7. split ------------------------------------------------------------------------------------------


def test_split_contract(verdict):
    records = C.synth_corpus(C.make_synth_spec(5, 5, 40, 0.5), seed=0)
    sizes, members = [], []
    for seed in (0, 1, 2):
        tags = C.split(records, 0.8, seed)
        sizes.append((sum(t == "train" for _, t in tags), sum(t == "test" for _, t in tags)))
        members.append(frozenset(i for i, (_, t) in enumerate(tags) if t == "train"))
    corpus = C.prepare_corpus(records, "root 0", "whitespace", split_seed=4)
    ok = (len(records) == 1000 and set(sizes) == {(800, 200)} and len(set(members)) == 3
          and corpus.counts() == {"train": 800, "test": 200})
    verdict("split contract", ok, f"sizes {sizes}, prepared {corpus.counts()}, distinct memberships {len(set(members))}")


# 8. evaluation identities --------------------------------------------------------------------------


def test_evaluation_identities(verdict, tmp_path):
    rng = np.random.default_rng(8)
    worst = 0.0
    rows_ok = True
    for trial in range(200):
        c = int(rng.integers(1, 90))
        m = rng.integers(0, 20, (c, c)) * (rng.random((c, 1)) > 0.1)
        m[0, 0] += 1
        total = m.sum()
        acc = E.accuracy_of(m)
        weighted = sum(r * s for r, s in zip(E.recall_of(m), m.sum(axis=1)) if r is not None) / total
        worst = max(worst, abs(acc - np.trace(m) / total), abs(acc - weighted))
        if trial < 20:
            rep = E.LevelReport(3, [f"p{i // 3}@c, {i}" for i in range(c)], m)
            E.write_confusion_csv(rep, tmp_path / "m.csv")
            with open(tmp_path / "m.csv", newline="") as fh:
                grid = list(csv.reader(fh))
            rows_ok &= [sum(map(int, r[1:])) for r in grid[1:]] == rep.support and grid[0][1:] == rep.classes
    verdict("evaluation identities", worst <= 1e-12 and rows_ok,
            f"max identity error {worst:.1e} over 200 matrices; CSV row sums == supports: {rows_ok}")


# 9. qualitative ordering ------------------------------------------------------------------------------


def test_qualitative_hft_vs_hier(verdict):
    records = C.synth_corpus(C.make_synth_spec(4, 4, 200, 0.6), seed=0)
    corpus = C.prepare_corpus(records, "root 0", "whitespace", max_len=12)
    start = time.perf_counter()
    acc = {"hft": [], "hier": []}
    for seed in range(5):
        for regime in acc:
            cfg = T.TrainConfig(regime=regime, backbone="transformer", epochs_per_level=20, lr_max=3e-3, seed=seed,
                                backbone_config={"d_model": 8, "n_layers": 1, "n_heads": 2})
            acc[regime].append(E.evaluate(T.run(corpus, cfg), corpus, 3).accuracy)
    elapsed = time.perf_counter() - start
    hft, hier = np.mean(acc["hft"]), np.mean(acc["hier"])
    floor = 1 / 16 + 0.30
    ok = hft >= hier - 0.02 and min(hft, hier) >= floor and elapsed <= 900
    verdict("qualitative HFT vs Hier (level 3)", ok,
            f"mean test acc HFT={hft:.4f} {np.round(acc['hft'], 3).tolist()}, "
            f"Hier={hier:.4f} {np.round(acc['hier'], 3).tolist()}, floor {floor:.4f}, {elapsed:.0f}s")


# 10. qualified-name fidelity ------------------------------------------------------------------------------


def test_appendix_qualified_names(verdict):
    tree = build_tree((c1, c2, c3) for c1, c2, c3, _, _ in ROWS)
    got = [n.qualified_name for n in tree.nodes if n.level == 3]
    expected = [q for *_, q, _ in ROWS]
    found = [tree.lookup(q).name == c3 for _, _, c3, q, _ in ROWS]
    anchors = {"novel@world classics", "fast food and prepared food@meat products"} <= set(got)
    ok = sorted(got) == sorted(expected) and all(found) and anchors
    verdict("qualified-name fidelity", ok, f"{sum(found)}/{len(ROWS)} appendix rows reproduce their printed names")


def test_params_helpers_are_consistent():
    # guards the bitwise comparisons used above
    a = init_encoder(TransformerConfig(vocab_size=20, d_model=8, n_layers=1, n_heads=2), 0)
    assert P.equal(a, P.copy_params(a)) and P.digest(a) == P.digest(P.copy_params(a))
