"""Dense-layer machinery: forward, backward, loss, optimizer, init."""

import math

import numpy as np
import pytest

from relfusion.numcore import (
    DenseLayer,
    Mlp,
    OptimizerState,
    backward,
    fd_gradient,
    forward,
    init_layer,
    init_mlp,
    max_relative_error,
    mlp_from_json,
    mlp_to_json,
    sgd_step,
    softmax,
    softmax_xent,
)


def _layer(weights, bias):
    return DenseLayer(np.asarray(weights, dtype=float), np.asarray(bias, dtype=float))


class TestForward:
    def test_zero_layer_maps_to_zero(self):
        mlp = Mlp([_layer(np.zeros((3, 2)), np.zeros(3))])
        out, _ = forward(mlp, np.array([5.0, -7.0]))
        assert np.array_equal(out, np.zeros(3))

    def test_identity_layer(self):
        mlp = Mlp([_layer(np.eye(4), np.zeros(4))])
        x = np.array([1.0, -2.0, 3.0, -4.0])
        out, _ = forward(mlp, x)
        assert np.array_equal(out, x)

    def test_two_layer_hand_evaluation(self):
        w1 = [[1.0, 2.0], [3.0, -4.0]]
        b1 = [0.5, -0.5]
        w2 = [[2.0, 1.0], [0.0, -1.0]]
        b2 = [1.0, 2.0]
        mlp = Mlp([_layer(w1, b1), _layer(w2, b2)])
        x = np.array([1.0, -1.0])
        # By hand: z1 = (1-2+0.5, 3+4-0.5) = (-0.5, 6.5); relu -> (0, 6.5)
        # z2 = (2*0 + 1*6.5 + 1, 0 - 6.5 + 2) = (7.5, -4.5)
        out, _ = forward(mlp, x)
        assert np.allclose(out, [7.5, -4.5], atol=1e-15)

    def test_dimension_mismatch(self):
        mlp = Mlp([_layer(np.zeros((2, 3)), np.zeros(2))])
        with pytest.raises(ValueError):
            forward(mlp, np.zeros(4))

    def test_chain_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Mlp([_layer(np.zeros((2, 3)), np.zeros(2)), _layer(np.zeros((2, 3)), np.zeros(2))])

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        mlp = init_mlp([5, 8, 4], rng)
        x = rng.normal(size=5)
        a, _ = forward(mlp, x)
        b, _ = forward(mlp, x)
        assert np.array_equal(a, b)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(4)
        mlp = init_mlp([5, 8, 4], rng)
        xs = rng.normal(size=(6, 5))
        batch, _ = forward(mlp, xs)
        for i in range(6):
            single, _ = forward(mlp, xs[i])
            assert np.allclose(batch[i], single, atol=1e-12)


class TestBackward:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(5)
        mlp = init_mlp([4, 6, 3], rng)
        x = rng.normal(size=4)
        _, cache = forward(mlp, x)
        grads, grad_in = backward(mlp, cache, np.zeros(3))
        assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads)
        assert np.all(grad_in == 0)

    def test_single_linear_layer_closed_form(self):
        rng = np.random.default_rng(6)
        mlp = init_mlp([4, 3], rng)
        x = rng.normal(size=4)
        g = rng.normal(size=3)
        _, cache = forward(mlp, x)
        grads, grad_in = backward(mlp, cache, g)
        dw, db = grads[0]
        assert np.allclose(dw, np.outer(g, x), atol=1e-15)
        assert np.allclose(db, g, atol=1e-15)
        assert np.allclose(grad_in, g @ mlp.layers[0].weights, atol=1e-15)

    def test_three_layer_finite_difference(self):
        rng = np.random.default_rng(7)
        mlp = init_mlp([5, 7, 6, 3], rng)
        x = rng.normal(size=5)
        target_dir = rng.normal(size=3)

        def loss():
            out, _ = forward(mlp, x)
            return float(out @ target_dir)

        _, cache = forward(mlp, x)
        grads, _ = backward(mlp, cache, target_dir)
        for layer, (dw, db) in zip(mlp.layers, grads):
            fd_w = fd_gradient(loss, layer.weights)
            fd_b = fd_gradient(loss, layer.bias)
            assert max_relative_error(dw, fd_w) < 1e-4
            assert max_relative_error(db, fd_b) < 1e-4

    @pytest.mark.parametrize(
        "dims", [[22, 64, 64, 9], [48, 256, 256, 9], [16, 9]]
    )
    def test_branch_sized_configurations_spot_checked(self, dims):
        """Each layer stack shape the relationship heads use, spot-checked
        against finite differences on a random subset of parameters."""
        rng = np.random.default_rng(sum(dims))
        mlp = init_mlp(dims, rng)
        x = rng.normal(size=dims[0])
        target = int(rng.integers(0, dims[-1]))

        def loss():
            out, _ = forward(mlp, x)
            return float(softmax_xent(out, target)[0])

        out, cache = forward(mlp, x)
        _, dlogits = softmax_xent(out, target)
        grads, _ = backward(mlp, cache, dlogits)
        for layer, (dw, _) in zip(mlp.layers, grads):
            flat = layer.weights.reshape(-1)
            picks = rng.choice(flat.size, size=min(25, flat.size), replace=False)
            for idx in picks:
                orig = flat[idx]
                h = 1e-5
                flat[idx] = orig + h
                up = loss()
                flat[idx] = orig - h
                down = loss()
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                assert max_relative_error(
                    np.array([dw.reshape(-1)[idx]]), np.array([fd])
                ) < 1e-4


class TestSoftmaxXent:
    def test_uniform_logits_loss(self):
        for n in (2, 5, 10):
            loss, _ = softmax_xent(np.zeros(n), 0)
            assert loss == pytest.approx(math.log(n), abs=1e-12)

    def test_grad_sums_to_zero(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            z = rng.normal(scale=10, size=6)
            _, grad = softmax_xent(z, int(rng.integers(0, 6)))
            assert abs(grad.sum()) < 1e-12

    def test_extreme_logits_stable(self):
        loss, grad = softmax_xent(np.array([1000.0, 0.0]), 0)
        assert 0.0 <= loss < 1e-9
        assert np.all(np.isfinite(grad))

    def test_target_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_xent(np.zeros(3), 3)

    def test_batch_mode(self):
        rng = np.random.default_rng(9)
        z = rng.normal(size=(4, 5))
        t = np.array([0, 1, 2, 3])
        losses, grads = softmax_xent(z, t)
        for i in range(4):
            li, gi = softmax_xent(z[i], int(t[i]))
            assert losses[i] == pytest.approx(li, abs=1e-14)
            assert np.allclose(grads[i], gi, atol=1e-14)


class TestSoftmax:
    def test_sums_to_one(self):
        rng = np.random.default_rng(10)
        z = rng.normal(scale=50, size=(200, 7))
        s = softmax(z)
        assert np.all(np.abs(s.sum(axis=1) - 1.0) < 1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            z = rng.normal(scale=10, size=9)
            c = float(rng.uniform(-100, 100))
            assert np.all(np.abs(softmax(z + c) - softmax(z)) < 1e-12)


class TestSgd:
    def test_zero_grad_no_change(self):
        p = np.array([1.0, 2.0])
        state = OptimizerState(learning_rate=0.1, momentum=0.9)
        sgd_step([p], [np.zeros(2)], state)
        assert np.array_equal(p, [1.0, 2.0])

    def test_plain_gradient_descent(self):
        p = np.array([1.0, 2.0])
        g = np.array([0.5, -0.5])
        state = OptimizerState(learning_rate=0.1, momentum=0.0)
        sgd_step([p], [g], state)
        assert np.allclose(p, [0.95, 2.05], atol=1e-15)

    def test_quadratic_converges_geometrically(self):
        # f(w) = ||w||^2, grad = 2w, lr 0.1 -> w scales by 0.8 per step
        w = np.array([1.0, 1.0])
        state = OptimizerState(learning_rate=0.1, momentum=0.0)
        for _ in range(100):
            sgd_step([w], [2.0 * w], state)
        assert np.linalg.norm(w) < 1e-6
        assert np.allclose(w, 0.8**100 * np.ones(2), rtol=1e-9)

    def test_shape_mismatch(self):
        state = OptimizerState(learning_rate=0.1)
        with pytest.raises(ValueError):
            sgd_step([np.zeros(2)], [np.zeros(3)], state)

    def test_momentum_accumulates(self):
        p = np.zeros(1)
        g = np.ones(1)
        state = OptimizerState(learning_rate=1.0, momentum=0.5)
        sgd_step([p], [g], state)  # v = -1, p = -1
        sgd_step([p], [g], state)  # v = -1.5, p = -2.5
        assert p[0] == pytest.approx(-2.5, abs=1e-15)


class TestInitLayer:
    def test_same_seed_identical(self):
        a = init_layer(8, 4, np.random.default_rng(42))
        b = init_layer(8, 4, np.random.default_rng(42))
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.bias, b.bias)

    def test_variance_matches_rectifier_scaling(self):
        rng = np.random.default_rng(12)
        layer = init_layer(50, 200, rng)
        sample = layer.weights.reshape(-1)
        assert sample.size == 10000
        assert abs(sample.var() - 2.0 / 50) < 0.1 * (2.0 / 50)

    def test_bias_zero(self):
        layer = init_layer(5, 3, np.random.default_rng(1))
        assert np.all(layer.bias == 0.0)


class TestSerialization:
    def test_mlp_json_roundtrip(self):
        mlp = init_mlp([4, 6, 2], np.random.default_rng(2))
        again = mlp_from_json(mlp_to_json(mlp))
        for l1, l2 in zip(mlp.layers, again.layers):
            assert np.array_equal(l1.weights, l2.weights)
            assert np.array_equal(l1.bias, l2.bias)
