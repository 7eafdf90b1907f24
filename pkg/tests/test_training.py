import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphrec import diffmath as dm
from graphrec.graphdata import DatasetSplit, RatingGraph, RatingTriple, SocialGraph
from graphrec.model import ModelShape, forward_batch, is_bias, predict_many
from graphrec.training import (
    DivergenceError, EarlyStopping, OptimizerState, TrainConfig, derive_rng, eval_view, init_params, loss,
    rmsprop_step, train, triples_to_arrays,
)

from conftest import FIVE, Fixture


def memorization_fixture(seed=0, n=6):
    rng = np.random.default_rng(seed)
    pairs = set()
    while len(pairs) < 20:
        pairs.add((int(rng.integers(n)), int(rng.integers(n))))
    triples = [RatingTriple(u, i, int(rng.integers(1, 6))) for u, i in sorted(pairs)]
    graph = RatingGraph(triples, n, n)
    social = SocialGraph.from_edges(n, [(k, (k + 1) % n) for k in range(n)])
    return graph, social, triples


# --- initialisation ----------------------------------------------------------------------------


def test_init_statistics():
    params = init_params(ModelShape(1000, 500, 5, 100), seed=0)
    sample = params.tensors["user_emb"].ravel()[:100_000]
    assert sample.size == 100_000
    assert abs(sample.mean()) < 0.003
    assert abs(sample.std() - 0.1) < 0.005


def test_init_determinism_and_zero_biases():
    shape = ModelShape(7, 5, 5, 6)
    a, b, c = init_params(shape, 3), init_params(shape, 3), init_params(shape, 4)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])
        if is_bias(name):
            assert not a.tensors[name].any()
        else:
            assert not np.array_equal(a.tensors[name], c.tensors[name])


def test_purpose_streams_are_independent():
    x = derive_rng(5, "shuffle").random(4)
    assert np.array_equal(x, derive_rng(5, "shuffle").random(4))
    assert not np.array_equal(x, derive_rng(5, "dropout").random(4))
    assert not np.array_equal(x, derive_rng(6, "shuffle").random(4))


# --- loss --------------------------------------------------------------------------------------


def test_loss_examples():
    assert loss([2, 4, 1], [2, 4, 1]) == 0.0
    assert loss([3, 5], [3, 3]) == 1.0
    assert loss([4.0], [3]) == 0.5
    with pytest.raises(dm.ContractError):
        loss([], [])
    with pytest.raises(dm.ContractError):
        loss([1.0], [1, 2])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.integers(1, 5)), min_size=1, max_size=30))
def test_loss_non_negative_and_zero_iff_equal(rows):
    preds, truths = zip(*rows)
    value = loss(preds, truths)
    assert value >= 0.0
    assert (value == 0.0) == all(p == t for p, t in rows)
    tape = dm.Tape()
    p = tape.leaf(np.asarray(preds, dtype=float).reshape(-1, 1))
    assert dm.half_mse(p, truths).item() == pytest.approx(value, rel=1e-12, abs=1e-15)


# --- rmsprop -----------------------------------------------------------------------------------


def test_rmsprop_zero_gradient_leaves_params():
    theta = {"w": np.array([[1.0, -2.0]])}
    state = OptimizerState()
    rmsprop_step(theta, {"w": np.zeros((1, 2))}, state, lr=0.01)
    assert theta["w"].tolist() == [[1.0, -2.0]]


def test_rmsprop_first_step():
    theta = {"w": np.zeros((1, 1))}
    state = OptimizerState()
    rmsprop_step(theta, {"w": np.ones((1, 1))}, state, lr=0.01, decay=0.9, eps=1e-8)
    assert state.squares["w"][0, 0] == pytest.approx(0.1, abs=1e-15)
    assert theta["w"][0, 0] == pytest.approx(-0.01 / (math.sqrt(0.1) + 1e-8), abs=1e-15)
    assert theta["w"][0, 0] == pytest.approx(-0.0316228, abs=1e-7)


def test_rmsprop_constant_gradient_step_tends_to_lr():
    theta = {"w": np.zeros((1, 1))}
    state = OptimizerState()
    prev = 0.0
    for _ in range(300):
        rmsprop_step(theta, {"w": np.full((1, 1), 2.5)}, state, lr=0.01)
        step, prev = prev - theta["w"][0, 0], theta["w"][0, 0]
    assert step == pytest.approx(0.01, rel=1e-6)


def test_rmsprop_shape_mismatch():
    with pytest.raises(dm.ContractError):
        rmsprop_step({"w": np.zeros((2, 1))}, {"w": np.zeros((1, 2))}, OptimizerState(), lr=0.1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_subnormal=False), min_size=1, max_size=10))
def test_rmsprop_accumulator_non_negative_and_moves_params(gs):
    theta = {"w": np.zeros((1, len(gs)))}
    state = OptimizerState()
    g = np.asarray(gs).reshape(1, -1)
    rmsprop_step(theta, {"w": g}, state, lr=0.01)
    assert (state.squares["w"] >= 0).all()
    assert np.array_equal(theta["w"] != 0, g != 0)


# --- early stopping ----------------------------------------------------------------------------


def _trace(scores, patience=5):
    stopper = EarlyStopping(patience)
    for epoch, s in enumerate(scores, start=1):
        if stopper.update(epoch, s):
            return epoch, stopper
    return None, stopper


def test_early_stopping_on_rising_curve():
    stop, stopper = _trace([1.0, 1.1, 1.2, 1.3, 1.4, 1.5])
    assert stop == 6 and stopper.best_epoch == 1


def test_early_stopping_counter_resets():
    stopper = EarlyStopping(5)
    stopper.update(1, 1.0)
    stopper.update(2, 1.1)
    assert stopper.bad_epochs == 1
    stopper.update(3, 0.9)
    assert stopper.bad_epochs == 0 and stopper.best_epoch == 3
    stop, _ = _trace([1.0, 1.1, 0.9, 1.0, 1.0, 1.0, 1.0, 1.0])
    assert stop == 8


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.1, 3.0), min_size=1, max_size=40), st.integers(1, 6))
def test_early_stopping_best_is_minimum_seen(scores, patience):
    stop, stopper = _trace(scores, patience)
    seen = scores[: stop or len(scores)]
    assert stopper.best == min(seen)
    assert seen[stopper.best_epoch - 1] == stopper.best


# --- training loop -----------------------------------------------------------------------------


def _small_problem():
    fx = Fixture(**FIVE, dim=4, seed=0)
    t = fx.triples
    return fx.graph, fx.social, DatasetSplit(t[:8], t[8:10], t[10:], seed=0)


def test_training_is_deterministic():
    graph, social, split = _small_problem()
    cfg = TrainConfig(embed_dim=4, batch_size=3, max_epochs=4, patience=10, seed=2, dropout_rate=0.5)
    a, b = train(graph, social, split, cfg), train(graph, social, split, cfg)
    assert [(h.train_loss, h.val_rmse) for h in a.history] == [(h.train_loss, h.val_rmse) for h in b.history]
    for name in a.params.tensors:
        assert np.array_equal(a.params.tensors[name], b.params.tensors[name])


def test_training_returns_best_epoch_params():
    graph, social, split = _small_problem()
    cfg = TrainConfig(embed_dim=4, batch_size=4, max_epochs=12, patience=2, seed=1, learning_rate=0.05)
    result = train(graph, social, split, cfg)
    assert result.best_val_rmse == min(h.val_rmse for h in result.history)
    assert result.history[result.best_epoch - 1].val_rmse == result.best_val_rmse
    pairs, truth = triples_to_arrays(split.validation)
    view = eval_view(graph.restricted(split.train), social, cfg)
    preds = predict_many(pairs, view, result.params)
    assert math.sqrt(np.mean((preds - truth) ** 2)) == pytest.approx(result.best_val_rmse, abs=1e-12)


def test_training_requires_validation():
    graph, social, split = _small_problem()
    with pytest.raises(dm.ContractError):
        train(graph, social, DatasetSplit(split.train, [], split.test, seed=0), TrainConfig(embed_dim=4))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch_and_batch():
    graph, social, split = _small_problem()
    cfg = TrainConfig(embed_dim=4, batch_size=4, max_epochs=3, seed=0)
    params = init_params(ModelShape(graph.n_users, graph.n_items, 5, 4), 0)
    params.tensors["predict.w"][...] = np.inf  # first batch loss is non-finite
    with pytest.raises(DivergenceError, match=r"epoch 1, batch 1"):
        train(graph, social, split, cfg, params=params)


def test_every_parameter_with_gradient_moves():
    fx = Fixture(**FIVE, dim=5, seed=3, weight_std=0.5)
    pred, tape = forward_batch(fx.pairs, fx.view, fx.params)
    grads = tape.backward(dm.half_mse(pred, fx.truths))
    before = fx.params.copy()
    rmsprop_step(fx.params, grads, OptimizerState(), lr=0.001)
    for name, g in grads.items():
        changed = before.tensors[name] != fx.params.tensors[name]
        assert np.array_equal(changed, g != 0), name


@pytest.mark.parametrize("seed", [0, 3])
def test_memorises_twenty_ratings(seed):
    graph, social, triples = memorization_fixture()
    split = DatasetSplit(triples, triples, triples, seed=0)  # validation = train, so the best epoch is the best fit
    cfg = TrainConfig(embed_dim=32, learning_rate=0.001, batch_size=5, dropout_rate=0.0,
                      max_epochs=500, patience=500, seed=seed)
    result = train(graph, social, split, cfg)
    pairs, truth = triples_to_arrays(triples)
    fitted = loss(predict_many(pairs, eval_view(graph, social, cfg), result.params), truth)
    assert fitted < 0.01


def test_config_validation():
    for bad in [dict(learning_rate=0), dict(dropout_rate=1.0), dict(patience=0), dict(embed_dim=0)]:
        with pytest.raises(ValueError):
            TrainConfig(**bad)
