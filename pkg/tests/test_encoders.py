import numpy as np
import pytest

from hierft import numeric as nm
from hierft import params as P
from hierft.encoder_cnn import CnnConfig, encode_batch_cnn, init_cnn
from hierft.encoder_transformer import TransformerConfig, encode_batch, init_encoder
from hierft.errors import ContractError
from hierft.head import head_forward, init_head, predict, probabilities

TOY_T = dict(vocab_size=20, d_model=8, n_layers=1, n_heads=2, max_positions=6, dropout_p=0.1)
TOY_C = dict(vocab_size=20, embed_dim=8, kernel_widths=[2, 3, 4], filters_per_width=3, dropout_p=0.1)


def toy_batch():
    ids = np.array([[2, 5, 7, 9, 0, 0], [2, 11, 3, 0, 0, 0]])
    mask = (ids != 0).astype(np.uint8)
    return ids, mask


def randomize(params, seed, std=0.4):
    rng = np.random.default_rng(seed)
    for t in params.values():
        t.data = t.data + std * rng.standard_normal(t.shape)
    return params


# transformer ---------------------------------------------------------------


def test_transformer_init_deterministic_and_stated_values():
    cfg = TransformerConfig(**TOY_T)
    a, b = init_encoder(cfg, 3), init_encoder(cfg, 3)
    assert P.equal(a, b)
    assert not P.equal(a, init_encoder(cfg, 4))
    assert all(np.all(t.data == 1.0) for k, t in a.items() if k.endswith(".g"))
    assert all(np.all(t.data == 0.0) for k, t in a.items() if k.endswith(".b") or ".b_" in k)


def test_transformer_embedding_std():
    cfg = TransformerConfig(vocab_size=2000, d_model=8, n_layers=1, n_heads=2)
    emb = init_encoder(cfg, 0)["tok_emb"].data
    assert emb.size >= 10_000
    assert abs(emb.std() - 0.02) <= 0.003
    assert np.abs(emb).max() <= 0.04


def test_transformer_config_validation():
    with pytest.raises(ContractError):
        TransformerConfig(vocab_size=10, d_model=6, n_heads=4)
    assert TransformerConfig(vocab_size=10, d_model=8, n_heads=2).d_ff == 32


def test_transformer_degenerate_all_pad_is_finite():
    cfg = TransformerConfig(**TOY_T)
    out = encode_batch(init_encoder(cfg, 0), cfg, [[2, 0, 0, 0]], [[1, 0, 0, 0]])
    assert out.shape == (1, 8) and np.all(np.isfinite(out.data))


def test_transformer_errors():
    cfg = TransformerConfig(**TOY_T)
    params = init_encoder(cfg, 0)
    with pytest.raises(IndexError):
        encode_batch(params, cfg, [[2, 20]], [[1, 1]])
    with pytest.raises(ContractError):
        encode_batch(params, cfg, [[2] * 7], [[1] * 7])


def test_transformer_pad_invariance():
    cfg = TransformerConfig(vocab_size=20, d_model=8, n_layers=2, n_heads=2, max_positions=12, dropout_p=0.0)
    params = randomize(init_encoder(cfg, 1), 5)
    ids, mask = toy_batch()
    base = encode_batch(params, cfg, ids, mask).data
    longer_ids = np.concatenate([ids, np.zeros((2, 4), dtype=int)], axis=1)
    longer_mask = np.concatenate([mask, np.zeros((2, 4), dtype=np.uint8)], axis=1)
    np.testing.assert_allclose(encode_batch(params, cfg, longer_ids, longer_mask).data, base, atol=1e-9, rtol=0)
    junk = np.where(mask == 1, ids, 13)  # arbitrary ids behind the mask
    np.testing.assert_allclose(encode_batch(params, cfg, junk, mask).data, base, atol=1e-9, rtol=0)


def test_transformer_order_blind_without_positions():
    cfg = TransformerConfig(vocab_size=20, d_model=8, n_layers=2, n_heads=2, max_positions=6, dropout_p=0.0)
    params = randomize(init_encoder(cfg, 2), 6)
    params["pos_emb"].data[:] = 0.0
    ids = np.array([[2, 5, 7, 9, 4, 0]])
    mask = (ids != 0).astype(np.uint8)
    perm = np.array([[2, 9, 4, 5, 7, 0]])
    np.testing.assert_allclose(encode_batch(params, cfg, perm, mask).data,
                               encode_batch(params, cfg, ids, mask).data, atol=1e-9, rtol=0)


def test_transformer_eval_is_bitwise_deterministic_and_train_uses_dropout():
    cfg = TransformerConfig(**TOY_T)
    params = init_encoder(cfg, 0)
    ids, mask = toy_batch()
    a = encode_batch(params, cfg, ids, mask).data
    b = encode_batch(params, cfg, ids, mask).data
    assert a.tobytes() == b.tobytes()
    t = encode_batch(params, cfg, ids, mask, train=True, rng=np.random.default_rng(0)).data
    assert not np.array_equal(a, t)


def test_transformer_end_to_end_gradient():
    cfg = TransformerConfig(**TOY_T)
    enc = randomize(init_encoder(cfg, 0), 11, std=0.3)
    head = init_head(2, 8, 3, seed=1)
    head.w.data = np.random.default_rng(12).standard_normal((8, 3))
    ids, mask = toy_batch()
    names = list(enc)

    def f(*ts):
        p = dict(zip(names, ts[:-2]))
        head.w, head.b = ts[-2], ts[-1]
        return nm.cross_entropy(head_forward(head, encode_batch(p, cfg, ids, mask)), [0, 2])

    assert nm.grad_check(f, [enc[k] for k in names] + [head.w, head.b]) <= 1e-4


# cnn -------------------------------------------------------------------------


def test_cnn_init():
    cfg = CnnConfig(vocab_size=50)
    assert cfg.feature_dim == 300
    a = init_cnn(CnnConfig(**TOY_C), 0)
    assert P.equal(a, init_cnn(CnnConfig(**TOY_C), 0))
    assert all(np.all(t.data == 0) for k, t in a.items() if k.endswith(".b"))
    with pytest.raises(ContractError):
        CnnConfig(vocab_size=5, kernel_widths=[3, 4])


def test_cnn_short_sequence_and_shape():
    cfg = CnnConfig(**TOY_C)
    params = init_cnn(cfg, 0)
    out = encode_batch_cnn(params, cfg, [[2, 5]], [[1, 1]])
    assert out.shape == (1, 9) and np.all(np.isfinite(out.data))
    ids, mask = toy_batch()
    assert encode_batch_cnn(params, cfg, ids, mask).shape == (2, 9)


def test_cnn_pad_invariance():
    cfg = CnnConfig(**{**TOY_C, "dropout_p": 0.0})
    params = randomize(init_cnn(cfg, 0), 3)
    ids, mask = toy_batch()
    base = encode_batch_cnn(params, cfg, ids, mask).data
    more = np.concatenate([ids, np.zeros((2, 5), dtype=int)], axis=1)
    more_mask = np.concatenate([mask, np.zeros((2, 5), dtype=np.uint8)], axis=1)
    np.testing.assert_allclose(encode_batch_cnn(params, cfg, more, more_mask).data, base, atol=1e-9, rtol=0)
    junk = np.where(mask == 1, ids, 17)
    np.testing.assert_allclose(encode_batch_cnn(params, cfg, junk, mask).data, base, atol=1e-9, rtol=0)


def test_cnn_end_to_end_gradient():
    cfg = CnnConfig(**TOY_C)
    enc = randomize(init_cnn(cfg, 0), 13, std=0.3)
    head = init_head(3, cfg.feature_dim, 3, seed=2)
    head.w.data = np.random.default_rng(14).standard_normal(head.w.shape)
    ids, mask = toy_batch()
    names = list(enc)

    def f(*ts):
        p = dict(zip(names, ts[:-2]))
        head.w, head.b = ts[-2], ts[-1]
        return nm.cross_entropy(head_forward(head, encode_batch_cnn(p, cfg, ids, mask)), [1, 2])

    assert nm.grad_check(f, [enc[k] for k in names] + [head.w, head.b]) <= 1e-4


# head ------------------------------------------------------------------------


def test_head_examples():
    h = init_head(2, 4, 3, seed=0)
    h.w.data[:] = 0.0
    logits = head_forward(h, nm.Tensor(np.ones((2, 4))))
    np.testing.assert_array_equal(logits.data, 0.0)
    np.testing.assert_allclose(probabilities(logits), 1 / 3)
    h = init_head(2, 1, 2, seed=0)
    h.w.data = np.array([[1.0, -1.0]])
    np.testing.assert_array_equal(head_forward(h, nm.Tensor([[2.0]])).data, [[2.0, -2.0]])


def test_head_shape_error():
    from hierft.errors import ShapeError
    with pytest.raises(ShapeError):
        head_forward(init_head(2, 4, 3, 0), nm.Tensor(np.ones((1, 5))))


def test_head_gradient():
    rng = np.random.default_rng(0)
    h = init_head(3, 4, 3, seed=0)
    h.w.data = rng.standard_normal((4, 3))
    x = nm.Tensor(rng.standard_normal((5, 4)))

    def f(x, w, b):
        h.w, h.b = w, b
        return nm.cross_entropy(head_forward(h, x), [0, 1, 2, 1, 0])

    assert nm.grad_check(f, [x, h.w, h.b]) <= 1e-5


def test_predict_examples_and_ties():
    assert predict(np.array([[0.1, 0.9]])).tolist() == [1]
    assert predict(np.array([[0.5, 0.5]])).tolist() == [0]
    rows = np.random.default_rng(1).standard_normal((100, 7)) * 5
    np.testing.assert_array_equal(predict(rows), predict(probabilities(rows)))
    np.testing.assert_array_equal(predict(rows), predict(rows + 42.0))
    np.testing.assert_array_equal(predict(rows), predict(np.tanh(rows / 10)))


def test_heads_share_no_storage():
    a, b = init_head(2, 4, 3, seed=0), init_head(3, 4, 3, seed=0)
    before = b.w.data.copy()
    a.w.data += 1.0
    a.w.data[0, 0] = 99.0
    assert b.w.data.tobytes() == before.tobytes()
