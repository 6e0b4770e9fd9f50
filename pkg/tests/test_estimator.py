import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rode import numerics as nx
from rode.estimator import RodeFineTuner, check_pairs, check_token_sequences
from rode.exceptions import InputError
from rode.tasks import sample_batch
from rode.training import build_pretrained
from rode.model import TransformerConfig


def _data(world, n=16, seed=0):
    samples = sample_batch(world, (1, 0, 0, 1), n, nx.make_rng(seed))
    return [s.prompt for s in samples], [list(s.target) for s in samples]


def test_check_token_sequences():
    assert check_token_sequences([(1, 2), np.array([3])]) == [[1, 2], [3]]
    for bad in ("abc", [], [[]], [[1.5]], [[True]], [[-1]], 5):
        with pytest.raises(InputError):
            check_token_sequences(bad)
    with pytest.raises(InputError, match="outside vocabulary"):
        check_token_sequences([[0, 7]], vocab_size=7)
    with pytest.raises(InputError, match="different lengths"):
        check_pairs([[1]], [[2], [3]])


def test_params_round_trip_and_clone():
    est = RodeFineTuner(strategy="top1", rank_list=(4, 4), total_iters=7)
    params = est.get_params()
    assert params["strategy"] == "top1" and params["total_iters"] == 7
    twin = clone(est)
    assert twin.get_params() == params
    twin.set_params(strategy="softmax")
    assert twin.strategy == "softmax" and est.strategy == "top1"


def test_unfitted_estimator_refuses_to_predict():
    with pytest.raises(NotFittedError):
        RodeFineTuner().predict([[1, 2]])


def test_fit_predict_transform(world):
    X, y = _data(world)
    est = RodeFineTuner(rank_list=(2, 4), total_iters=10, vocab_size=world.vocab.size).fit(X, y)
    assert len(est.train_loss_) == 10
    preds = est.predict(X[:3])
    assert len(preds) == 3 and all(1 <= len(p) <= est.max_new_tokens for p in preds)
    feats = est.transform(X[:5])
    names = est.get_feature_names_out()
    assert feats.shape == (5, len(names)) == (5, 2 * 2 * 2)
    assert names[0] == "block0.query.e0"
    assert np.all(feats >= 0)
    assert 0.0 <= est.score(X[:4], y[:4]) <= 1.0
    with pytest.raises(InputError):
        est.predict([[world.vocab.size]])


def test_fit_is_deterministic(world):
    X, y = _data(world)
    a = RodeFineTuner(rank_list=(2,), total_iters=5).fit(X, y)
    b = RodeFineTuner(rank_list=(2,), total_iters=5).fit(X, y)
    assert a.train_loss_ == b.train_loss_
    np.testing.assert_array_equal(a.transform(X), b.transform(X))


def test_fit_on_pretrained_base_keeps_it_frozen(world):
    base = build_pretrained(TransformerConfig(vocab_size=world.vocab.size), world, seed=0, pretrain_steps=3)
    before = {k: p.value.copy() for k, p in base.base_parameters().items()}
    X, y = _data(world)
    est = RodeFineTuner(base=base, rank_list=(2, 2), total_iters=4).fit(X, y)
    assert est.vocab_size_ == world.vocab.size
    for k, p in est.model_.base_parameters().items():
        np.testing.assert_array_equal(p.value, before[k])
        np.testing.assert_array_equal(base.base_parameters()[k].value, before[k])
