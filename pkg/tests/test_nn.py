"""Numeric core tests. Oracles: a pure-python per-example forward pass and
central finite differences; analytic results must match them, not the other
way around."""

import math

import numpy as np
import pytest

from metareweight.errors import DimensionError, NonFiniteError
from metareweight.nn import (
    Batch,
    MLPModel,
    backward_per_example,
    dot_with_each,
    finite_diff_grad,
    forward,
    mean_loss,
    sgd_step,
    weighted_gradient,
)

_ACT_SCALAR = {
    "relu": lambda v: v if v > 0 else 0.0,
    "tanh": math.tanh,
    "sigmoid": lambda v: 1.0 / (1.0 + math.exp(-v)),
}


def naive_example_loss_probs(model, x, label):
    """Reference forward pass: python floats, explicit bias, shifted softmax."""
    act = _ACT_SCALAR[model.activation]
    a = [float(v) for v in x]
    z = []
    for l, w in enumerate(model.layers):
        a = a + [1.0]
        z = [sum(a[p] * w[p, q] for p in range(len(a))) for q in range(w.shape[1])]
        if l < len(model.layers) - 1:
            a = [act(v) for v in z]
    mx = max(z)
    exps = [math.exp(v - mx) for v in z]
    total = sum(exps)
    loss = math.log(total) - (z[label] - mx)
    return loss, [e / total for e in exps]


def random_model(rng, sizes, activation="relu", bias_scale=0.0):
    model = MLPModel.init(sizes, activation=activation, rng=rng)
    if bias_scale:
        for w in model.layers:
            w[-1, :] = bias_scale * rng.standard_normal(w.shape[1])
    return model


def random_batch(rng, n, d, k):
    return Batch(rng.random((n, d)), rng.integers(0, k, size=n))


class TestForward:
    @pytest.mark.parametrize("activation", ["relu", "tanh", "sigmoid"])
    def test_matches_naive_loop(self, activation):
        rng = np.random.default_rng(3)
        model = random_model(rng, [7, 5, 4], activation, bias_scale=0.4)
        batch = random_batch(rng, 9, 7, 4)
        cache = forward(model, batch)
        for i in range(len(batch)):
            loss, probs = naive_example_loss_probs(model, batch.inputs[i], int(batch.labels[i]))
            assert abs(float(cache.losses[i]) - loss) <= 1e-12
            assert np.abs(cache.probs[i] - probs).max() <= 1e-12

    def test_three_layer_matches_naive_loop(self):
        rng = np.random.default_rng(4)
        model = random_model(rng, [5, 6, 4, 3], "tanh", bias_scale=0.2)
        batch = random_batch(rng, 4, 5, 3)
        cache = forward(model, batch)
        for i in range(len(batch)):
            loss, _ = naive_example_loss_probs(model, batch.inputs[i], int(batch.labels[i]))
            assert abs(float(cache.losses[i]) - loss) <= 1e-12

    def test_losses_nonnegative_probs_normalized(self):
        rng = np.random.default_rng(5)
        model = random_model(rng, [6, 4, 3], "relu")
        batch = random_batch(rng, 32, 6, 3)
        cache = forward(model, batch)
        assert (cache.losses >= 0).all()
        assert np.abs(cache.probs.sum(axis=1) - 1.0).max() <= 1e-12

    def test_extreme_logits_stay_finite(self):
        # Large weights drive logits to +-1e4; the shifted softmax must not
        # overflow, and the correct-class loss must be near zero.
        w = np.zeros((3, 2))
        w[0] = [1e4, -1e4]
        model = MLPModel([w])
        batch = Batch(np.array([[1.0, 0.0]]), np.array([0]))
        cache = forward(model, batch)
        assert np.isfinite(cache.losses).all()
        assert float(cache.losses[0]) <= 1e-12

    def test_feature_mismatch_raises(self):
        model = MLPModel.init([4, 3, 2])
        with pytest.raises(DimensionError):
            forward(model, Batch(np.zeros((2, 5)), np.zeros(2, dtype=int)))

    def test_nan_input_raises(self):
        model = MLPModel.init([3, 2])
        bad = np.zeros((2, 3))
        bad[1, 1] = np.nan
        with pytest.raises(NonFiniteError):
            forward(model, Batch(bad, np.zeros(2, dtype=int)))

    def test_label_out_of_range_raises(self):
        model = MLPModel.init([3, 4, 2])
        with pytest.raises(DimensionError):
            forward(model, Batch(np.zeros((1, 3)), np.array([2])))

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(6)
        model = random_model(rng, [6, 5, 3], "sigmoid", bias_scale=0.1)
        batch = random_batch(rng, 8, 6, 3)
        a = forward(model, batch)
        b = forward(model, batch)
        assert np.array_equal(a.losses, b.losses)
        assert np.array_equal(a.probs, b.probs)
        for x, y in zip(a.post, b.post):
            assert np.array_equal(x, y)


class TestBackward:
    @pytest.mark.parametrize("activation", ["relu", "tanh", "sigmoid"])
    def test_per_example_matches_finite_differences(self, activation):
        rng = np.random.default_rng(8)
        model = random_model(rng, [6, 5, 3], activation, bias_scale=0.3)
        batch = random_batch(rng, 5, 6, 3)
        grads = backward_per_example(model, forward(model, batch), batch)
        for i in range(len(batch)):
            fd = finite_diff_grad(model, lambda m, i=i: float(forward(m, batch).losses[i]))
            err = np.abs(grads.flat_one(i) - fd) / (1.0 + np.abs(fd))
            assert err.max() <= 1e-6

    def test_relu_dead_unit_has_zero_gradient(self):
        # Input 0 with zero bias lands exactly on the relu kink; the chosen
        # subgradient is 0, so weights into that unit get no signal.
        rng = np.random.default_rng(9)
        model = random_model(rng, [3, 4, 2], "relu")
        batch = Batch(np.zeros((1, 3)), np.array([0]))
        grads = backward_per_example(model, forward(model, batch), batch)
        assert np.array_equal(grads.signals[0], np.zeros((1, 4)))

    def test_saturated_correct_example_has_tiny_gradient(self):
        w = np.zeros((3, 2))
        w[0] = [50.0, -50.0]
        model = MLPModel([w])
        batch = Batch(np.array([[1.0, 0.0]]), np.array([0]))
        grads = backward_per_example(model, forward(model, batch), batch)
        assert math.sqrt(float(grads.norms_squared()[0])) <= 1e-12

    def test_flat_reconstruction_bitwise(self):
        rng = np.random.default_rng(10)
        model = random_model(rng, [5, 4, 3], "tanh", bias_scale=0.2)
        batch = random_batch(rng, 7, 5, 3)
        grads = backward_per_example(model, forward(model, batch), batch)
        flat = grads.flat()
        assert flat.shape == (7, model.param_count)
        for i in range(7):
            assert np.array_equal(flat[i], grads.flat_one(i))

    def test_norms_squared_matches_flat(self):
        rng = np.random.default_rng(12)
        model = random_model(rng, [5, 4, 3], "sigmoid", bias_scale=0.2)
        batch = random_batch(rng, 6, 5, 3)
        grads = backward_per_example(model, forward(model, batch), batch)
        want = (grads.flat() ** 2).sum(axis=1)
        assert np.abs(grads.norms_squared() - want).max() <= 1e-12 * max(1.0, want.max())


class TestWeightedGradient:
    def test_matches_explicit_sum(self):
        rng = np.random.default_rng(14)
        model = random_model(rng, [6, 4, 3], "relu", bias_scale=0.2)
        batch = random_batch(rng, 5, 6, 3)
        grads = backward_per_example(model, forward(model, batch), batch)
        w = rng.random(5)
        got = weighted_gradient(grads, w)
        want = sum(w[i] * grads.flat_one(i) for i in range(5))
        assert np.abs(got - want).max() <= 1e-12 * max(1.0, np.abs(want).max())

    def test_matches_finite_differences_of_weighted_loss(self):
        rng = np.random.default_rng(15)
        model = random_model(rng, [5, 4, 2], "tanh", bias_scale=0.1)
        batch = random_batch(rng, 4, 5, 2)
        w = rng.random(4)
        grads = backward_per_example(model, forward(model, batch), batch)
        fd = finite_diff_grad(model, lambda m: float(w @ forward(m, batch).losses))
        err = np.abs(weighted_gradient(grads, w) - fd) / (1.0 + np.abs(fd))
        assert err.max() <= 1e-6

    def test_zero_weights_give_zero_gradient(self):
        rng = np.random.default_rng(16)
        model = random_model(rng, [4, 3, 2], "relu")
        batch = random_batch(rng, 3, 4, 2)
        grads = backward_per_example(model, forward(model, batch), batch)
        assert np.array_equal(weighted_gradient(grads, np.zeros(3)), np.zeros(model.param_count))

    def test_weight_shape_mismatch_raises(self):
        rng = np.random.default_rng(17)
        model = random_model(rng, [4, 3, 2], "relu")
        batch = random_batch(rng, 3, 4, 2)
        grads = backward_per_example(model, forward(model, batch), batch)
        with pytest.raises(DimensionError):
            weighted_gradient(grads, np.zeros(4))

    def test_dot_with_each_matches_flat(self):
        rng = np.random.default_rng(18)
        model = random_model(rng, [5, 4, 3], "sigmoid", bias_scale=0.3)
        batch = random_batch(rng, 6, 5, 3)
        grads = backward_per_example(model, forward(model, batch), batch)
        v = rng.standard_normal(model.param_count)
        want = grads.flat() @ v
        got = dot_with_each(grads, v)
        assert np.abs(got - want).max() <= 1e-11 * max(1.0, np.abs(want).max())


class TestModelAndStep:
    def test_init_glorot_bounds_and_zero_bias(self):
        rng = np.random.default_rng(19)
        model = MLPModel.init([20, 10, 4], rng=rng)
        for w, (d_in, d_out) in zip(model.layers, [(20, 10), (10, 4)]):
            limit = math.sqrt(6.0 / (d_in + d_out))
            assert np.abs(w[:-1]).max() <= limit
            assert np.array_equal(w[-1], np.zeros(d_out))
        assert model.param_count == 21 * 10 + 11 * 4

    def test_flatten_roundtrip_bitwise(self):
        rng = np.random.default_rng(20)
        model = random_model(rng, [6, 5, 3], "tanh", bias_scale=0.5)
        rebuilt = model.with_params(model.flatten())
        for a, b in zip(model.layers, rebuilt.layers):
            assert np.array_equal(a, b)

    def test_layer_shape_chain_validated(self):
        with pytest.raises(DimensionError):
            MLPModel([np.zeros((4, 3)), np.zeros((3, 2))])  # needs (3+1, 2)

    def test_sgd_step_moves_exactly(self):
        rng = np.random.default_rng(21)
        model = random_model(rng, [4, 3, 2], "relu", bias_scale=0.2)
        g = rng.standard_normal(model.param_count)
        stepped = sgd_step(model, g, 0.05)
        assert np.array_equal(stepped.flatten(), model.flatten() - 0.05 * g)

    def test_sgd_step_alpha_zero_is_identity(self):
        rng = np.random.default_rng(22)
        model = random_model(rng, [4, 3, 2], "relu")
        stepped = sgd_step(model, rng.standard_normal(model.param_count), 0.0)
        assert np.array_equal(stepped.flatten(), model.flatten())

    def test_sgd_step_rejects_bad_inputs(self):
        model = MLPModel.init([3, 2])
        with pytest.raises(DimensionError):
            sgd_step(model, np.zeros(5), 0.1)
        with pytest.raises(NonFiniteError):
            sgd_step(model, np.full(model.param_count, np.nan), 0.1)
        with pytest.raises(ValueError):
            sgd_step(model, np.zeros(model.param_count), -0.1)

    def test_step_linear_in_weights(self):
        # theta_hat(w + h e_i) - theta_hat(w) must equal -alpha h grad_i to
        # machine precision: the lookahead's exactness rests on this.
        rng = np.random.default_rng(23)
        model = random_model(rng, [5, 4, 2], "tanh", bias_scale=0.1)
        batch = random_batch(rng, 4, 5, 2)
        grads = backward_per_example(model, forward(model, batch), batch)
        w0 = rng.random(4)
        alpha, h, i = 0.3, 0.7, 2
        base = sgd_step(model, weighted_gradient(grads, w0), alpha).flatten()
        w1 = w0.copy()
        w1[i] += h
        moved = sgd_step(model, weighted_gradient(grads, w1), alpha).flatten()
        want = -alpha * h * grads.flat_one(i)
        assert np.abs((moved - base) - want).max() <= 1e-12 * max(1.0, np.abs(want).max())

    def test_mean_loss_matches_naive(self):
        rng = np.random.default_rng(24)
        model = random_model(rng, [4, 3, 2], "relu", bias_scale=0.1)
        batch = random_batch(rng, 5, 4, 2)
        want = np.mean(
            [naive_example_loss_probs(model, batch.inputs[i], int(batch.labels[i]))[0] for i in range(5)]
        )
        assert abs(mean_loss(model, batch) - want) <= 1e-12


class TestBatchValidation:
    def test_label_count_mismatch(self):
        with pytest.raises(DimensionError):
            Batch(np.zeros((3, 2)), np.zeros(2, dtype=int))

    def test_empty_batch(self):
        with pytest.raises(DimensionError):
            Batch(np.zeros((0, 2)), np.zeros(0, dtype=int))

    def test_non_2d_inputs(self):
        with pytest.raises(DimensionError):
            Batch(np.zeros(4), np.zeros(4, dtype=int))
