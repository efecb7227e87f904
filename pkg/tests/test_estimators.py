import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import SMALL_MODEL
from regcl.estimators import LoraSegmenter, RegCLMerger
from regcl.harness import ModelConfig, base_model
from regcl.merging import MergeState, merge_adapters


def _seg(**kw):
    params = dict(hidden=SMALL_MODEL.hidden, rank=SMALL_MODEL.rank, epochs=3, random_state=3)
    params.update(kw)
    return LoraSegmenter(**params)


def test_params_and_clone():
    est = _seg(lr=0.1)
    assert est.get_params()["lr"] == 0.1
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    est.set_params(epochs=1)
    assert est.epochs == 1


def test_segmenter_fit_predict(small_tasks):
    tr, te = small_tasks[0]
    est = _seg().fit(tr.inputs, tr.targets)
    proba = est.predict_proba(te.inputs)
    assert proba.shape == te.targets.shape and np.all((proba >= 0) & (proba <= 1))
    assert set(np.unique(est.predict(te.inputs))) <= {0.0, 1.0}
    assert 0.0 <= est.score(te.inputs, te.targets) <= 1.0
    assert est.n_features_in_ == 64
    assert set(est.grams_) == {"fc1", "fc2"}
    assert len(est.history_) == 3 * 6
    assert len(est.checkpoint_.adapters) == 2


def test_segmenter_deterministic_and_init_model(small_tasks, small_base):
    tr, _ = small_tasks[0]
    a = _seg().fit(tr.inputs, tr.targets)
    b = _seg().fit(tr.inputs, tr.targets)
    assert a.checkpoint_.same_values(b.checkpoint_)
    default_init = base_model(3, ModelConfig(hidden=SMALL_MODEL.hidden, rank=SMALL_MODEL.rank, grid=8))
    c = _seg(init_model=default_init.to_checkpoint()).fit(tr.inputs, tr.targets)
    assert c.checkpoint_.same_values(a.checkpoint_)
    d = _seg(init_model=small_base).fit(tr.inputs, tr.targets)
    assert np.array_equal(d.model_.encoder, small_base.encoder)


def test_segmenter_validation(small_tasks):
    tr, _ = small_tasks[0]
    with pytest.raises(NotFittedError):
        _seg().predict(tr.inputs)
    X = tr.inputs.copy()
    X[0, 0] = np.nan
    with pytest.raises(ValueError):
        _seg().fit(X, tr.targets)
    with pytest.raises(ValueError, match="square grid"):
        _seg().fit(np.zeros((4, 10)), np.zeros((4, 10)))
    est = _seg(epochs=0).fit(tr.inputs, tr.targets)
    with pytest.raises(ValueError, match="features"):
        est.predict(np.zeros((2, 10)))


def test_merger_matches_functional_api(small_tasks, small_base):
    segs = [_seg(init_model=small_base).fit(tr.inputs, tr.targets) for tr, _ in small_tasks[:3]]
    merger = RegCLMerger().fit(segs)
    state = MergeState()
    for s in segs:
        state = merge_adapters(state, s.checkpoint_, s.grams_)
    assert merger.n_tasks_ == 3
    assert merger.merged_.same_values(state.merged)
    te = small_tasks[0][1]
    assert merger.predict_proba(te.inputs).shape == te.targets.shape
    # partial_fit continues; fit restarts.
    merger.partial_fit(segs[0].checkpoint_, segs[0].grams_)
    assert merger.n_tasks_ == 4
    assert merger.fit(segs[:1]).n_tasks_ == 1


def test_merger_validation(small_base):
    with pytest.raises(NotFittedError):
        RegCLMerger().predict(np.zeros((1, 64)))
    with pytest.raises(ValueError, match="grams"):
        RegCLMerger().partial_fit(small_base.to_checkpoint())
    with pytest.raises(ValueError):
        RegCLMerger().fit([])
    with pytest.raises(NotFittedError):
        RegCLMerger().partial_fit(_seg())
