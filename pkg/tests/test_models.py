import numpy as np
import pytest

from mmfl.models import (
    DivergenceError,
    ModelSpec,
    TrainConfig,
    gradient,
    init_weights,
    local_train,
    loss,
)

SOFTMAX = ModelSpec("softmax", feature_dim=6, num_labels=4)
MLP = ModelSpec("mlp", feature_dim=6, num_labels=4, hidden_dims=(5,))


def finite_difference(weights, features, labels, spec, step=1e-5):
    """Central-difference gradient, the independent check for backprop."""
    fd = np.zeros_like(weights)
    for j in range(len(weights)):
        up = weights.copy()
        down = weights.copy()
        up[j] += step
        down[j] -= step
        fd[j] = (loss(up, features, labels, spec) - loss(down, features, labels, spec)) / (
            2 * step
        )
    return fd


def random_case(spec, rng, n=12):
    w = rng.normal(scale=0.5, size=spec.parameter_count)
    x = rng.normal(size=(n, spec.feature_dim))
    y = rng.integers(0, spec.num_labels, size=n)
    return w, x, y


def test_parameter_count_arithmetic():
    assert SOFTMAX.parameter_count == 6 * 4 + 4
    assert MLP.parameter_count == 6 * 5 + 5 + 5 * 4 + 4


def test_zero_weights_uniform_loss():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(9, 6))
    y = rng.integers(0, 4, size=9)
    assert loss(np.zeros(SOFTMAX.parameter_count), x, y, SOFTMAX) == pytest.approx(
        np.log(4), abs=1e-12
    )


def test_large_margin_loss_vanishes():
    # single point whose correct logit dominates: loss -> 0 with the margin
    w = np.zeros(SOFTMAX.parameter_count)
    x = np.zeros((1, 6))
    x[0, 0] = 1.0
    y = np.array([2])
    prev = np.inf
    for margin in (1.0, 5.0, 25.0):
        w2 = w.copy()
        # weight row for label 2, feature 0
        w2[2 * 6 + 0] = margin
        value = loss(w2, x, y, SOFTMAX)
        assert value < prev
        prev = value
    assert prev < 1e-10


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError, match="dim"):
        loss(np.zeros(SOFTMAX.parameter_count), np.zeros((3, 5)), np.zeros(3, dtype=int), SOFTMAX)
    with pytest.raises(ValueError, match="length"):
        loss(np.zeros(7), np.zeros((3, 6)), np.zeros(3, dtype=int), SOFTMAX)


def test_zero_weight_balanced_batch_zero_bias_gradient():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 6))
    y = np.repeat(np.arange(4), 2)  # class balanced
    g = gradient(np.zeros(SOFTMAX.parameter_count), x, y, SOFTMAX)
    bias = g[6 * 4 :]
    assert np.allclose(bias, 0.0, atol=1e-15)


@pytest.mark.parametrize("spec", [SOFTMAX, MLP], ids=["softmax", "mlp"])
def test_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(42)
    for _ in range(50):
        w, x, y = random_case(spec, rng)
        g = gradient(w, x, y, spec)
        fd = finite_difference(w, x, y, spec)
        rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-5)
        assert rel.max() < 1e-4


def test_duplicated_point_mean_invariance():
    rng = np.random.default_rng(3)
    w = rng.normal(scale=0.3, size=SOFTMAX.parameter_count)
    x = rng.normal(size=(1, 6))
    y = np.array([1])
    g1 = gradient(w, x, y, SOFTMAX)
    gk = gradient(w, np.repeat(x, 5, axis=0), np.repeat(y, 5), SOFTMAX)
    assert np.allclose(g1, gk, atol=1e-14)


def test_local_train_zero_lr_zero_update():
    rng = np.random.default_rng(4)
    w, x, y = random_case(SOFTMAX, rng)
    cfg = TrainConfig(local_epochs=3, batch_size=4, learning_rate=1e-300)
    update = local_train(w, x, y, SOFTMAX, cfg, np.random.default_rng(0))
    assert np.allclose(update.delta, 0.0, atol=1e-290)


def test_local_train_single_full_batch_step_exact():
    rng = np.random.default_rng(5)
    w, x, y = random_case(SOFTMAX, rng)
    eta = 0.2
    cfg = TrainConfig(local_epochs=1, batch_size=len(x), learning_rate=eta)
    update = local_train(w, x, y, SOFTMAX, cfg, np.random.default_rng(0))
    assert np.allclose(update.delta, eta * gradient(w, x, y, SOFTMAX), atol=1e-15)
    assert update.steps == 1


def test_local_train_deterministic():
    rng = np.random.default_rng(6)
    w, x, y = random_case(MLP, rng, n=20)
    cfg = TrainConfig(local_epochs=4, batch_size=5, learning_rate=0.1)
    a = local_train(w, x, y, MLP, cfg, np.random.default_rng(123))
    b = local_train(w, x, y, MLP, cfg, np.random.default_rng(123))
    assert np.array_equal(a.delta, b.delta)


def test_local_train_steps_mode_counts_steps():
    rng = np.random.default_rng(7)
    w, x, y = random_case(SOFTMAX, rng, n=20)
    cfg = TrainConfig(local_epochs=7, batch_size=6, learning_rate=0.05, local_unit="steps")
    update = local_train(w, x, y, SOFTMAX, cfg, np.random.default_rng(0))
    assert update.steps == 7


def test_divergence_raises_with_context():
    rng = np.random.default_rng(8)
    w, x, y = random_case(SOFTMAX, rng)
    cfg = TrainConfig(local_epochs=5, batch_size=4, learning_rate=1e308)
    with pytest.raises(DivergenceError, match="divergence"):
        local_train(w, x, y, SOFTMAX, cfg, np.random.default_rng(0), round_index=9)


def test_full_batch_descent_non_increasing():
    # convex softmax model under small-step full-batch descent
    rng = np.random.default_rng(9)
    w, x, y = random_case(SOFTMAX, rng, n=30)
    losses = [loss(w, x, y, SOFTMAX)]
    for _ in range(25):
        w = w - 0.05 * gradient(w, x, y, SOFTMAX)
        losses.append(loss(w, x, y, SOFTMAX))
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_two_blob_convergence():
    rng = np.random.default_rng(10)
    spec = ModelSpec("softmax", feature_dim=2, num_labels=2)
    n = 60
    y = np.repeat(np.arange(2), n // 2)
    centers = np.array([[3.0, 0.0], [-3.0, 0.0]])
    x = centers[y] + 0.2 * rng.normal(size=(n, 2))
    w = init_weights(spec, seed=0)
    cfg = TrainConfig(local_epochs=40, batch_size=16, learning_rate=0.5)
    update = local_train(w, x, y, spec, cfg, np.random.default_rng(0))
    assert loss(w - update.delta, x, y, spec) < 0.1


def test_init_weights_deterministic_and_sized():
    a = init_weights(MLP, seed=11)
    b = init_weights(MLP, seed=11)
    c = init_weights(MLP, seed=12)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert len(a) == MLP.parameter_count
