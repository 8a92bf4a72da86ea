import numpy as np
import pytest

from streamfilter.datagen import default_config, generate
from streamfilter.geometry import Tractogram
from streamfilter.models import ModelSpec
from streamfilter.training import (
    TrainConfig,
    cross_validate,
    incremental_train,
    split_folds,
    split_indices,
    train,
)
from streamfilter.rng import Rng


@pytest.fixture(scope="module")
def small():
    return generate(default_config(160, seed=3))


def test_overfit_twenty(small):
    t = small.subset(np.arange(20))
    assert len(set(t.labels)) == 2
    cfg = TrainConfig(ModelSpec(arch="vf", seed=1), epochs=200, batch=8, val_fraction=0.2)
    res = train(cfg, t, val=t)
    assert res.log.rows[-1]["train_acc"] == 1.0


def test_training_deterministic(small):
    cfg = TrainConfig(ModelSpec(arch="pn", seed=2), epochs=3, batch=32, seed=5)
    a = train(cfg, small)
    b = train(cfg, small)
    assert a.log.to_csv() == b.log.to_csv()
    assert len(a.log) == 3
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert np.array_equal(p.value, q.value)


def test_split_is_partition(small):
    cfg = TrainConfig(ModelSpec(arch="pn"), epochs=1, batch=64)
    res = train(cfg, small)
    assert not set(res.train_idx) & set(res.val_idx)
    assert len(res.train_idx) + len(res.val_idx) == len(small)
    tr, te = split_indices(100, 0.25, Rng(1))
    assert sorted(np.concatenate([tr, te])) == list(range(100)) and len(te) == 25


def test_lr_column():
    t = generate(default_config(12, seed=4))
    cfg = TrainConfig(ModelSpec(arch="pn", encoder_width=8, blocks=((4,),), head=(4,)),
                      epochs=181, batch=64, val_fraction=0.25)
    col = train(cfg, t).log.column("lr")
    assert col[0] == 1e-3
    assert col[90] == pytest.approx(7e-4, rel=1e-12)
    assert col[180] == pytest.approx(4.9e-4, rel=1e-12)


def test_loss_trend_first_epochs():
    t = generate(default_config(600, seed=6))
    cfg = TrainConfig(ModelSpec(arch="pn"), epochs=10, batch=64)
    loss = train(cfg, t).log.column("train_loss")
    best = np.minimum.accumulate(loss)
    assert best[-1] < loss[0]


def test_single_class_rejected(small):
    one = small.subset(np.flatnonzero(small.labels == 1))
    with pytest.raises(ValueError, match="single class"):
        train(TrainConfig(ModelSpec(arch="pn"), epochs=1), one)


def test_cross_validation(small):
    cfg = TrainConfig(ModelSpec(arch="pn"), epochs=1, batch=64, val_fraction=0.25)
    res = cross_validate(cfg, split_folds(small, 3, seed=1))
    assert len(res.reports) == 3
    for k in ("accuracy", "precision", "recall", "dsc"):
        assert 0 <= res.mean[k] <= 1 and res.std[k] >= 0
    same = cross_validate(cfg, [small, small])
    assert same.reports[0] == same.reports[1]
    with pytest.raises(ValueError):
        cross_validate(cfg, [small, Tractogram([])])
    with pytest.raises(ValueError):
        cross_validate(cfg, [small])


def test_incremental(small):
    cfg = TrainConfig(ModelSpec(arch="pn"), epochs=1, batch=64)
    out = incremental_train(cfg, small, [{1, 2}, {1, 2}])
    assert out[0][1] == out[1][1]
    bundles = small.subset(np.flatnonzero(small.class_ids > 0))
    with pytest.raises(ValueError, match="single class"):
        incremental_train(cfg, bundles, [set(range(1, 9))])
    with pytest.raises(ValueError, match="monoton"):
        incremental_train(cfg, small, [{1, 2}, {1}])
