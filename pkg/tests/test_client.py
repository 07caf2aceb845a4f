import math

import numpy as np
import pytest

from fedet.client import LocalTrainConfig, evaluate, local_train
from fedet.datasets import Dataset, generate_synthetic
from fedet.errors import ArgumentError, StateError
from fedet.numerics import DenseLayer
from fedet.zoo import BackboneSpec, Head, HeterogeneousModel, build_model
from helpers import params_equal
from oracles import batch_grad, to_plain


@pytest.fixture
def shard():
    return generate_synthetic(4, 6, 20, 0.4, seed=2)


@pytest.fixture
def model():
    return build_model(BackboneSpec((10,), 6, 8), 4, seed=3)


def test_zero_rate_leaves_model(model, shard):
    out = local_train(model, shard, LocalTrainConfig(5, 8, 0.0), np.random.default_rng(0))
    assert params_equal(out, model)


def test_input_snapshot_not_mutated(model, shard):
    before = model.copy()
    local_train(model, shard, LocalTrainConfig(10, 8, 0.5), np.random.default_rng(0))
    assert params_equal(model, before)


def test_full_batch_step_matches_oracle(model, shard):
    lr = 0.3
    out = local_train(model, shard, LocalTrainConfig(1, len(shard), lr), np.random.default_rng(1))
    grads = batch_grad(to_plain(model.layers), shard.features.tolist(), shard.labels.tolist())
    for new, old, (gw, gb) in zip(out.layers, model.layers, grads):
        np.testing.assert_allclose(new.weights, old.weights - lr * np.array(gw), rtol=0, atol=1e-10)
        np.testing.assert_allclose(new.bias, old.bias - lr * np.array(gb), rtol=0, atol=1e-10)


def test_training_reduces_loss(model):
    data = generate_synthetic(4, 6, 60, 0.3, seed=5)
    before = evaluate(model, data).mean_loss
    after = evaluate(local_train(model, data, LocalTrainConfig(200, 16, 0.1), np.random.default_rng(0)), data)
    assert after.mean_loss < before


def test_deterministic_replay(model, shard):
    cfg = LocalTrainConfig(15, 4, 0.2)
    a = local_train(model, shard, cfg, np.random.default_rng(42))
    b = local_train(model, shard, cfg, np.random.default_rng(42))
    for x, y in zip(a.layers, b.layers):
        assert x.weights.tobytes() == y.weights.tobytes()
        assert x.bias.tobytes() == y.bias.tobytes()


def test_empty_shard(model):
    with pytest.raises(StateError):
        local_train(model, Dataset(np.zeros((0, 6)), np.zeros(0, dtype=int)), LocalTrainConfig(1, 1, 0.1),
                    np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ArgumentError):
        LocalTrainConfig(0, 4, 0.1)
    with pytest.raises(ArgumentError):
        LocalTrainConfig(3, 0, 0.1)


def _constant_model(d, n_classes, logits):
    """A model whose output ignores the input."""
    zero = DenseLayer(np.zeros((2, d)), np.zeros(2))
    head = Head([DenseLayer(np.zeros((2, 2)), np.zeros(2)),
                 DenseLayer(np.zeros((n_classes, 2)), np.asarray(logits, dtype=float), "identity")])
    return HeterogeneousModel([zero], head)


def test_uniform_model_loss_is_log_n():
    data = generate_synthetic(4, 3, 10, 0.3, seed=0)
    res = evaluate(_constant_model(3, 4, np.zeros(4)), data)
    assert res.mean_loss == pytest.approx(math.log(4), abs=1e-12)
    assert res.accuracy == 0.25  # all ties go to class 0


def test_perfect_predictor():
    data = Dataset(np.array([[1.0, 0.0], [0.0, 1.0]] * 5), np.array([0, 1] * 5))
    w = np.array([[50.0, 0.0], [0.0, 50.0]])
    model = HeterogeneousModel(
        [DenseLayer(np.eye(2), np.zeros(2))],
        Head([DenseLayer(np.eye(2), np.zeros(2)), DenseLayer(w, np.zeros(2), "identity")]),
    )
    assert evaluate(model, data).accuracy == 1.0


def test_random_model_near_chance():
    n_classes = 4
    accs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        data = Dataset(rng.normal(size=(200, 5)), rng.integers(0, n_classes, 200))
        accs.append(evaluate(build_model(BackboneSpec((8,), 5, 6), n_classes, seed=seed), data).accuracy)
    band = 3 * math.sqrt(0.25 * 0.75 / (200 * 20))
    assert abs(np.mean(accs) - 0.25) <= band


def test_evaluate_empty():
    with pytest.raises(ArgumentError):
        evaluate(_constant_model(3, 4, np.zeros(4)), Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int)))
