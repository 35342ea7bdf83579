import pytest

from hierft import corpus as C
from hierft import trainer as T

TOY_TRANSFORMER = dict(d_model=8, n_layers=1, n_heads=2)
TOY_CNN = dict(embed_dim=8, kernel_widths=[2, 3, 4], filters_per_width=4)


def toy_corpus(n_parents=2, n_children=2, per_leaf=8, mixing=0.5, seed=0, max_len=10, train_fraction=0.8):
    recs = C.synth_corpus(C.make_synth_spec(n_parents, n_children, per_leaf, mixing), seed=seed)
    return C.prepare_corpus(recs, "root 0", "whitespace", max_len, split_seed=0, train_fraction=train_fraction)


def toy_config(regime="hft", backbone="transformer", epochs=2, **kw):
    bcfg = TOY_TRANSFORMER if backbone == "transformer" else TOY_CNN
    fields = dict(regime=regime, backbone=backbone, epochs_per_level=epochs, batch_size=8, lr_max=1e-2,
                  backbone_config=dict(bcfg), seed=0)
    fields.update(kw)
    return T.TrainConfig(**fields)


@pytest.fixture(scope="session")
def small_corpus():
    return toy_corpus()
