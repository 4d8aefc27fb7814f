"""Tests for neuralnet module."""

import numpy as np
import pytest

from particle_mfg.errors import ConfigurationError, TrainingError
from particle_mfg.neuralnet import (
    MAGIC,
    adam_step,
    backward,
    forward,
    init_adam,
    init_mlp,
    load_mlp,
    mlp_from_bytes,
    mlp_to_bytes,
    save_mlp,
)


def preactivations(net, x):
    """隠れ層の前活性化 (ReLU の折れ目チェック用)"""
    h, out = x, []
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        z = h @ W.T + b
        out.append(z)
        h = np.maximum(z, 0.0) if net.activation == "relu" else z / (1.0 + np.exp(-z))
    return out


def away_from_kinks(net, rng, batch):
    """全ての前活性化が0から十分離れた入力を引く"""
    while True:
        x = rng.standard_normal((batch, net.widths[0]))
        if net.activation != "relu" or min(np.abs(z).min() for z in preactivations(net, x)) > 1e-3:
            return x


class TestGradientCheck:
    """逆伝播と中心差分の一致 (パラメータ勾配・入力勾配)"""

    @pytest.mark.parametrize("activation", ["relu", "swish"])
    @pytest.mark.parametrize("seed", range(5))
    def test_backward_matches_central_difference(self, activation, seed):
        rng = np.random.default_rng(seed)
        widths = tuple(int(w) for w in rng.integers(1, 33, size=4))
        net = init_mlp(widths, activation, seed=seed)
        # バイアスも0以外にする
        net = net.set_flat(net.get_flat() + 0.1 * rng.standard_normal(net.n_params))
        x = away_from_kinks(net, rng, batch=3)
        upstream = rng.standard_normal((3, widths[-1]))

        def loss(params, inputs):
            return float(np.sum(upstream * forward(net.set_flat(params), inputs)))

        grads, grad_x = backward(net, x, upstream)
        params = net.get_flat()
        h = 1e-6

        fd = np.empty_like(params)
        for k in range(params.size):
            e = np.zeros_like(params)
            e[k] = h
            fd[k] = (loss(params + e, x) - loss(params - e, x)) / (2 * h)
        np.testing.assert_allclose(grads.flat(), fd, rtol=1e-5, atol=1e-7)

        fd_x = np.empty_like(x)
        for idx in np.ndindex(*x.shape):
            e = np.zeros_like(x)
            e[idx] = h
            fd_x[idx] = (loss(params, x + e) - loss(params, x - e)) / (2 * h)
        np.testing.assert_allclose(grad_x, fd_x, rtol=1e-5, atol=1e-7)


class TestForward:
    """forward 関数のテスト"""

    def test_zero_parameters(self):
        net = init_mlp((3, 16, 16, 2), seed=0)
        net = net.set_flat(np.zeros(net.n_params))
        assert np.array_equal(forward(net, np.ones((5, 3))), np.zeros((5, 2)))

    def test_single_linear_layer(self):
        net = init_mlp((3, 2), seed=1)
        net.biases[0][:] = [0.5, -1.0]
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(forward(net, x), net.weights[0] @ x + net.biases[0])

    def test_deterministic(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        a = forward(init_mlp((3, 8, 1), "swish", seed=7), x)
        b = forward(init_mlp((3, 8, 1), "swish", seed=7), x)
        assert np.array_equal(a, b)

    def test_zero_output_layer(self):
        net = init_mlp((2, 8, 2), seed=3, zero_output=True)
        assert np.array_equal(forward(net, np.ones((3, 2))), np.zeros((3, 2)))

    @pytest.mark.parametrize("activation", ["relu", "swish"])
    def test_output_layer_scaling(self, activation):
        """出力層の重みとバイアスを2倍すると出力もちょうど2倍"""
        rng = np.random.default_rng(4)
        net = init_mlp((3, 8, 8, 2), activation, seed=4)
        net.biases[-1][:] = rng.standard_normal(2)
        x = rng.standard_normal((6, 3))
        scaled = net.copy()
        scaled.weights[-1] *= 2.0
        scaled.biases[-1] *= 2.0
        assert np.array_equal(forward(scaled, x), 2.0 * forward(net, x))

    def test_relu_positive_homogeneity(self):
        net = init_mlp((3, 16, 16, 2), "relu", seed=6)
        x = np.random.default_rng(6).standard_normal((5, 3))
        assert np.array_equal(forward(net, 2.0 * x), 2.0 * forward(net, x))

    def test_input_width_mismatch(self):
        with pytest.raises(ConfigurationError):
            forward(init_mlp((3, 2), seed=0), np.ones(4))

    def test_unknown_activation(self):
        with pytest.raises(ConfigurationError):
            init_mlp((2, 2), activation="tanh")


class TestBackward:
    """backward 関数のテスト"""

    def test_linear_layer(self):
        net = init_mlp((3, 2), seed=0)
        x = np.array([1.0, -2.0, 0.5])
        u = np.array([0.3, -0.7])
        grads, grad_x = backward(net, x, u)
        np.testing.assert_allclose(grads.weights[0], np.outer(u, x))
        np.testing.assert_allclose(grads.biases[0], u)
        np.testing.assert_allclose(grad_x, net.weights[0].T @ u)

    def test_zero_upstream(self):
        net = init_mlp((2, 8, 3), "swish", seed=1)
        grads, grad_x = backward(net, np.ones((4, 2)), np.zeros((4, 3)))
        assert np.all(grads.flat() == 0.0)
        assert np.all(grad_x == 0.0)

    def test_upstream_shape_mismatch(self):
        net = init_mlp((2, 3), seed=0)
        with pytest.raises(ConfigurationError):
            backward(net, np.ones((4, 2)), np.ones((4, 2)))


class TestAdam:
    """adam_step 関数のテスト"""

    def test_zero_gradient(self):
        state = init_adam(3, lr=0.1)
        params = np.array([1.0, -2.0, 3.0])
        new, state = adam_step(state, params, np.zeros(3))
        assert np.array_equal(new, params)
        assert state.step == 1

    def test_zero_learning_rate(self):
        state = init_adam(3, lr=0.0)
        params = np.array([0.5, -1.5, 2.0])
        new, state = adam_step(state, params, np.array([1.0, -3.0, 0.2]))
        assert np.array_equal(new, params)
        assert state.step == 1

    def test_constant_gradient(self):
        """一定の勾配では符号と逆向きに毎ステップ lr ずつ動く"""
        state = init_adam(2, lr=0.01)
        params = np.zeros(2)
        g = np.array([3.0, -0.5])
        history = [params]
        for _ in range(50):
            params, state = adam_step(state, params, g)
            history.append(params)
        steps = np.diff(np.array(history), axis=0)
        assert np.all(steps[:, 0] < 0) and np.all(steps[:, 1] > 0)
        np.testing.assert_allclose(np.abs(steps[-1]), 0.01, rtol=1e-3)

    def test_non_finite_gradient(self):
        state = init_adam(2, lr=0.1)
        with pytest.raises(TrainingError) as exc:
            adam_step(state, np.zeros(2), np.array([np.nan, 0.0]))
        assert exc.value.step == 1

    def test_deterministic(self):
        def trajectory():
            rng = np.random.default_rng(9)
            state = init_adam(4, lr=0.05)
            params = np.zeros(4)
            for _ in range(10):
                params, state = adam_step(state, params, rng.standard_normal(4))
            return params
        assert np.array_equal(trajectory(), trajectory())


class TestSerialization:
    """ネットワークの保存・読み込みのテスト"""

    def test_file_round_trip(self, tmp_path):
        net = init_mlp((3, 5, 2), "swish", seed=2, time_input=True)
        path = save_mlp(net, tmp_path / "net.bin")
        loaded = load_mlp(path)
        assert loaded.widths == net.widths
        assert loaded.activation == "swish"
        assert loaded.time_input is True
        assert np.array_equal(loaded.get_flat(), net.get_flat())

    def test_layout(self):
        net = init_mlp((2, 1), seed=0)
        data = mlp_to_bytes(net)
        assert data.startswith(MAGIC)
        assert len(data) == len(MAGIC) + 4 + 2 * 4 + 2 + net.n_params * 8

    def test_bad_magic(self):
        with pytest.raises(ConfigurationError):
            mlp_from_bytes(b"NOTAMLP\x00" + bytes(16))

    def test_truncated_parameters(self):
        data = mlp_to_bytes(init_mlp((2, 3, 1), seed=0))
        with pytest.raises(ConfigurationError):
            mlp_from_bytes(data[:-8])
