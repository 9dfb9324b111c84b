"""Network substrate tests: gradients against finite differences, Adam
against a scalar reference, clipping and reparameterization identities."""

import numpy as np
import pytest

from sigmafed.errors import NumericError, ShapeError
from sigmafed.nn import (
    AdamState,
    DenseLayer,
    Mlp,
    SeededRng,
    adam_step,
    backprop,
    clip_grad_norm,
    init_dense,
    mlp_forward,
    reparam_sample,
)


def random_mlp(rng, dims):
    """Random net whose pre-activations stay clear of the ReLU kink, so
    finite differences are trustworthy."""
    layers = [init_dense(rng.derive(i), dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
    net = Mlp(layers)
    return net


def scalar_adam_reference(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Independent single-parameter Adam, written directly from the update
    equations, for cross-checking the vectorized implementation."""
    theta, m, v = 0.0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
        out.append(theta)
    return out


class TestMlpForward:
    def test_identity_layer(self):
        net = Mlp([DenseLayer(np.eye(2), np.zeros(2))])
        np.testing.assert_array_equal(mlp_forward(net, np.array([1.0, 2.0])), [1.0, 2.0])

    def test_zero_weights_hand_computed(self):
        # two 2x2 layers with zero weights: out = b2 + W2 @ relu(b1) = b2
        b1 = np.array([0.3, -0.7])
        b2 = np.array([1.5, 2.5])
        w2 = np.array([[2.0, 1.0], [0.0, 3.0]])
        net = Mlp([DenseLayer(np.zeros((2, 2)), b1), DenseLayer(w2, b2)])
        expected = b2 + w2 @ np.maximum(b1, 0.0)
        np.testing.assert_allclose(mlp_forward(net, np.array([5.0, -4.0])), expected)

    def test_relu_dead_zone(self):
        # W1 = -I with positive input zeroes the hidden layer entirely
        b2 = np.array([0.9, -0.1])
        net = Mlp([DenseLayer(-np.eye(2), np.zeros(2)), DenseLayer(np.ones((2, 2)), b2)])
        np.testing.assert_array_equal(mlp_forward(net, np.array([1.0, 2.0])), b2)

    def test_dimension_mismatch_names_layer(self):
        net = Mlp([DenseLayer(np.eye(3), np.zeros(3))])
        with pytest.raises(ShapeError):
            mlp_forward(net, np.zeros(2))
        with pytest.raises(ShapeError, match="layer 1"):
            Mlp([DenseLayer(np.eye(3), np.zeros(3)), DenseLayer(np.eye(2), np.zeros(2))])

    def test_deterministic(self):
        rng = SeededRng(5)
        net = random_mlp(rng, (4, 6, 3))
        x = rng.derive("x").normal(4)
        a = mlp_forward(net, x)
        b = mlp_forward(net, x)
        assert np.array_equal(a, b)


class TestBackprop:
    def _fd_check(self, net, x, upstream, h=1e-5, tol=1e-6):
        grads, gx = backprop(net, x, upstream)

        def objective():
            return float(mlp_forward(net, x) @ upstream)

        worst = 0.0
        for layer, (dw, db) in zip(net.layers, grads):
            for arr, g in ((layer.weights, dw), (layer.bias, db)):
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    ix = it.multi_index
                    old = arr[ix]
                    arr[ix] = old + h
                    up = objective()
                    arr[ix] = old - h
                    dn = objective()
                    arr[ix] = old
                    fd = (up - dn) / (2 * h)
                    denom = max(abs(fd), abs(g[ix]), 1e-4)
                    worst = max(worst, abs(fd - g[ix]) / denom)
        for i in range(x.size):
            old = x[i]
            x[i] = old + h
            up = objective()
            x[i] = old - h
            dn = objective()
            x[i] = old
            fd = (up - dn) / (2 * h)
            denom = max(abs(fd), abs(gx[i]), 1e-4)
            worst = max(worst, abs(fd - gx[i]) / denom)
        assert worst < tol, f"finite-difference mismatch {worst}"

    def test_matches_finite_differences_three_layers(self):
        rng = SeededRng(12)
        net = random_mlp(rng, (4, 5, 5, 3))
        x = rng.derive("x").normal(4)
        upstream = rng.derive("u").normal(3)
        self._fd_check(net, x, upstream)

    @pytest.mark.parametrize("dims", [(3, 4), (3, 4, 2), (5, 4, 4, 3), (2, 6, 5, 4, 3)])
    def test_all_layer_counts(self, dims):
        rng = SeededRng(hash(dims) % 2**32)
        net = random_mlp(rng, dims)
        x = rng.derive("x").normal(dims[0])
        upstream = rng.derive("u").normal(dims[-1])
        self._fd_check(net, x, upstream, tol=1e-5)

    def test_zero_upstream_gives_zero_gradients(self):
        rng = SeededRng(3)
        net = random_mlp(rng, (4, 4, 2))
        grads, gx = backprop(net, rng.derive("x").normal(4), np.zeros(2))
        assert np.all(gx == 0)
        for dw, db in grads:
            assert np.all(dw == 0) and np.all(db == 0)

    def test_single_linear_layer_input_grad(self):
        rng = SeededRng(8)
        w = rng.normal((3, 4))
        net = Mlp([DenseLayer(w, np.zeros(3))])
        upstream = rng.derive("u").normal(3)
        _, gx = backprop(net, rng.derive("x").normal(4), upstream)
        np.testing.assert_allclose(gx, w.T @ upstream, rtol=1e-12)

    def test_upstream_shape_checked(self):
        net = Mlp([DenseLayer(np.eye(2), np.zeros(2))])
        with pytest.raises(ShapeError):
            backprop(net, np.zeros(2), np.zeros(3))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState(params, lr=0.1)
        adam_step(state, params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])
        assert state.t == 1

    def test_first_step_magnitude(self):
        # with defaults the first update is ~ -lr * sign(g)
        for g in (3.7, -0.004, 120.0):
            params = {"w": np.array([0.0])}
            state = AdamState(params, lr=1e-3)
            adam_step(state, params, {"w": np.array([g])})
            assert abs(params["w"][0] + 1e-3 * np.sign(g)) < 1e-6

    def test_matches_scalar_reference(self):
        grads = [0.5, 0.5, -1.0, 2.0, 0.25]
        params = {"w": np.array([0.0])}
        state = AdamState(params, lr=1e-3)
        trajectory = []
        for g in grads:
            adam_step(state, params, {"w": np.array([g])})
            trajectory.append(params["w"][0])
        np.testing.assert_allclose(trajectory, scalar_adam_reference(grads), rtol=1e-12)

    def test_lr_zero_is_identity(self):
        rng = SeededRng(4)
        params = {"a": rng.normal(5), "b": rng.normal((2, 3))}
        before = {k: v.copy() for k, v in params.items()}
        state = AdamState(params, lr=0.0)
        for _ in range(3):
            adam_step(state, params, {k: rng.normal(v.shape) for k, v in params.items()})
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])

    def test_non_finite_gradient_names_block(self):
        params = {"ok": np.zeros(2), "bad": np.zeros(2)}
        state = AdamState(params, lr=1e-3)
        with pytest.raises(NumericError, match="bad"):
            adam_step(state, params, {"ok": np.zeros(2), "bad": np.array([1.0, np.nan])})


class TestClipGradNorm:
    def test_below_threshold_unchanged(self):
        g = {"a": np.array([0.3, 0.4])}  # norm 0.5
        clip_grad_norm(g, 1.0)
        np.testing.assert_array_equal(g["a"], [0.3, 0.4])

    def test_scaling_identity(self):
        g = {"a": np.array([3.0, 0.0]), "b": np.array([0.0, 4.0])}  # joint norm 5
        clip_grad_norm(g, 2.5)
        total = np.sqrt(sum(float(v @ v) for v in g.values()))
        assert abs(total - 2.5) < 1e-12
        np.testing.assert_allclose(g["a"], [1.5, 0.0])

    def test_paper_threshold_value(self):
        g = {"a": np.array([1.0])}
        clip_grad_norm(g, 1e-3)
        assert abs(g["a"][0] - 1e-3) < 1e-15

    def test_idempotent(self):
        rng = SeededRng(9)
        g = {"a": rng.normal(7), "b": rng.normal((3, 2))}
        clip_grad_norm(g, 0.1)
        once = {k: v.copy() for k, v in g.items()}
        clip_grad_norm(g, 0.1)
        for k in g:
            np.testing.assert_allclose(g[k], once[k], atol=1e-12)


class TestReparamSample:
    def test_zero_eps_returns_mu(self):
        mu = np.array([2.0, -1.0])
        np.testing.assert_array_equal(reparam_sample(mu, np.zeros(2), np.zeros(2)), mu)

    def test_unit_case(self):
        out = reparam_sample(np.zeros(2), np.zeros(2), np.array([1.0, -1.0]))
        np.testing.assert_array_equal(out, [1.0, -1.0])

    def test_monte_carlo_moments(self):
        rng = SeededRng(21)
        n = 100_000
        eps = rng.normal(n)
        draws = reparam_sample(np.full(n, 2.0), np.full(n, np.log(4.0)), eps)
        assert abs(draws.mean() - 2.0) < 0.02
        assert abs(draws.var() - 4.0) < 0.1

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            reparam_sample(np.zeros(2), np.zeros(3), np.zeros(2))

    def test_gradient_structure(self):
        # d out / d mu = 1, d out / d log_var = 0.5 * exp(0.5 lv) * eps
        mu = np.array([0.3])
        lv = np.array([-0.4])
        eps = np.array([1.7])
        h = 1e-6
        d_mu = (reparam_sample(mu + h, lv, eps) - reparam_sample(mu - h, lv, eps)) / (2 * h)
        d_lv = (reparam_sample(mu, lv + h, eps) - reparam_sample(mu, lv - h, eps)) / (2 * h)
        np.testing.assert_allclose(d_mu, 1.0, rtol=1e-6)
        np.testing.assert_allclose(d_lv, 0.5 * np.exp(0.5 * lv) * eps, rtol=1e-5)


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = SeededRng(123).derive("x", 4).normal(10)
        b = SeededRng(123).derive("x", 4).normal(10)
        np.testing.assert_array_equal(a, b)

    def test_derivation_is_independent_of_parent_state(self):
        root = SeededRng(7)
        root.normal(100)  # consume parent state
        a = root.derive("child").normal(5)
        b = SeededRng(7).derive("child").normal(5)
        np.testing.assert_array_equal(a, b)

    def test_distinct_keys_distinct_streams(self):
        a = SeededRng(7).derive("a").normal(5)
        b = SeededRng(7).derive("b").normal(5)
        assert not np.allclose(a, b)
