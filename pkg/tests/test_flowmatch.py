"""Tests for flowmatch module."""

import numpy as np
import pytest

from particle_mfg.ensemble import ParticleEnsemble, TimeGrid, dynamic_cost, init_trajectories
from particle_mfg.errors import ConfigurationError, IntegrationError
from particle_mfg.flowmatch import fm_loss, fm_pairs, fm_train, integrate, velocity
from particle_mfg.neuralnet import init_mlp
from particle_mfg.solver import w2_1d


def constant_field(d, c):
    """v ≡ c (出力層のバイアスのみ)"""
    net = init_mlp((d + 1, 4, d), seed=0, time_input=True, zero_output=True)
    net.biases[-1][:] = c
    return net


def identity_field():
    """1次元で v(x, t) = x"""
    net = init_mlp((2, 1), seed=0, time_input=True)
    net.weights[0][:] = [[1.0, 0.0]]
    return net


def crossing_pair(m):
    grid = TimeGrid(m)
    t = grid.nodes
    return ParticleEnsemble(grid=grid, states=np.stack([t, 1.0 - t])[:, :, None])


class TestFmPairs:
    """fm_pairs 関数のテスト"""

    def test_left_endpoint_inputs(self):
        ens = crossing_pair(4)
        batch = fm_pairs(ens)
        assert batch.x.shape == (8, 1)
        np.testing.assert_allclose(batch.t[:4], [0.0, 0.25, 0.5, 0.75])
        np.testing.assert_allclose(batch.target[:4, 0], 1.0)
        np.testing.assert_allclose(batch.target[4:, 0], -1.0)


class TestFmLoss:
    """fm_loss 関数のテスト"""

    def test_zero_net_constant_trajectories(self):
        ens = init_trajectories(np.ones((3, 2)), TimeGrid(5))
        assert fm_loss(constant_field(2, 0.0), ens) == 0.0

    def test_zero_net_unit_line(self):
        grid = TimeGrid(10)
        ens = ParticleEnsemble(grid=grid, states=grid.nodes[None, :, None])
        assert fm_loss(constant_field(1, 0.0), ens) == pytest.approx(1.0)

    def test_exact_fit(self):
        grid = TimeGrid(10)
        ens = ParticleEnsemble(grid=grid, states=(2.0 * grid.nodes)[None, :, None])
        assert fm_loss(constant_field(1, 2.0), ens) == pytest.approx(0.0, abs=1e-24)

    def test_width_mismatch(self):
        with pytest.raises(ConfigurationError):
            fm_loss(constant_field(2, 0.0), crossing_pair(4))


class TestFmTrain:
    """fm_train 関数のテスト"""

    def test_zero_steps(self):
        net = init_mlp((2, 8, 1), seed=0, time_input=True)
        trained, losses = fm_train(net, crossing_pair(4), steps=0, batch=2, lr=1e-3)
        assert losses == []
        assert np.array_equal(trained.get_flat(), net.get_flat())
        assert trained is not net

    def test_input_not_modified(self):
        net = init_mlp((2, 8, 1), seed=0, time_input=True)
        before = net.get_flat().copy()
        fm_train(net, crossing_pair(4), steps=5, batch=2, lr=1e-2, seed=0)
        assert np.array_equal(net.get_flat(), before)

    def test_small_lr_loss_decreases(self):
        rng = np.random.default_rng(0)
        grid = TimeGrid(10)
        x0 = rng.standard_normal((50, 1))
        ens = ParticleEnsemble(grid=grid, states=x0[:, None, :] * (1.0 + grid.nodes)[None, :, None])
        net = init_mlp((2, 16, 1), "swish", seed=1, time_input=True)
        _, losses = fm_train(net, ens, steps=200, batch=50, lr=1e-4, seed=2)
        assert len(losses) == 200
        assert losses[-1] <= losses[0]

    def test_deterministic(self):
        ens = crossing_pair(4)
        net = init_mlp((2, 8, 1), seed=3, time_input=True)
        a, la = fm_train(net, ens, steps=20, batch=1, lr=1e-2, seed=5)
        b, lb = fm_train(net, ens, steps=20, batch=1, lr=1e-2, seed=5)
        assert la == lb
        assert np.array_equal(a.get_flat(), b.get_flat())

    def test_crossing_point_averages(self):
        """交差点 (0.5, 0.5) の速度は +1 と -1 の平均 0"""
        ens = crossing_pair(10)
        net = init_mlp((2, 64, 64, 1), "swish", seed=4, time_input=True)
        trained, losses = fm_train(net, ens, steps=3000, batch=2, lr=3e-3, seed=6)
        v = velocity(trained, np.array([[0.5]]), 0.5)[0, 0]
        assert abs(v) < 0.05


class TestIntegrate:
    """integrate 関数のテスト"""

    @pytest.mark.parametrize("m", [1, 3, 17])
    def test_constant_field_euler(self, m):
        x0 = np.array([[0.0, 1.0], [2.0, -1.0]])
        ens = integrate(constant_field(2, np.array([0.5, -2.0])), x0, TimeGrid(m), "euler")
        np.testing.assert_allclose(ens.terminal, x0 + np.array([0.5, -2.0]), atol=1e-12)
        assert np.array_equal(ens.initial, x0)

    def test_zero_field(self):
        x0 = np.random.default_rng(0).standard_normal((5, 3))
        ens = integrate(constant_field(3, 0.0), x0, TimeGrid(4), "rk4")
        assert np.array_equal(ens.states, np.repeat(x0[:, None, :], 5, axis=1))

    def test_rk4_exponential(self):
        ens = integrate(identity_field(), np.array([[1.0], [-2.0]]), TimeGrid(20), "rk4")
        np.testing.assert_allclose(ens.terminal[:, 0] / ens.initial[:, 0], np.e, atol=1e-6)

    def test_threads_do_not_change_result(self):
        rng = np.random.default_rng(1)
        net = init_mlp((3, 16, 2), "swish", seed=2, time_input=True)
        x0 = rng.standard_normal((37, 2))
        single = integrate(net, x0, TimeGrid(8), "rk4", workers=1)
        threaded = integrate(net, x0, TimeGrid(8), "rk4", workers=4)
        np.testing.assert_allclose(threaded.states, single.states, rtol=1e-12, atol=1e-12)

    def test_divergence_reports_particle(self):
        net = identity_field()
        net.weights[0][:] = [[1e200, 0.0]]
        x0 = np.array([[0.0], [0.0], [1.0]])
        with pytest.raises(IntegrationError) as exc:
            integrate(net, x0, TimeGrid(4), "euler")
        assert exc.value.particle == 2
        assert exc.value.step >= 1

    def test_unknown_scheme(self):
        with pytest.raises(ConfigurationError):
            integrate(constant_field(1, 0.0), np.zeros((1, 1)), TimeGrid(2), "midpoint")

    def test_empty(self):
        ens = integrate(constant_field(2, 1.0), np.zeros((0, 2)), TimeGrid(3))
        assert ens.n == 0


def two_cluster_crossing(n, m):
    """x = -0.25 付近から右へ, +0.25 付近から左へ速さ 0.5 で進む直線軌道"""
    rng = np.random.default_rng(0)
    grid = TimeGrid(m)
    half = n // 2
    x0 = np.concatenate([rng.normal(-0.25, 0.3, half), rng.normal(0.25, 0.3, n - half)])
    speed = np.concatenate([np.full(half, 0.5), np.full(n - half, -0.5)])
    states = x0[:, None] + speed[:, None] * grid.nodes[None, :]
    return ParticleEnsemble(grid=grid, states=states[:, :, None])


class TestFlowMatchingResampling:
    """交差する軌道をフローマッチングで再サンプリングすると周辺分布は保たれ運動エネルギーは減る"""

    def resample(self, ens, hidden, steps):
        net = init_mlp((2, hidden, hidden, 1), "relu", seed=1, time_input=True)
        trained, _ = fm_train(net, ens, steps=steps, batch=ens.n, lr=5e-3, seed=2)
        return integrate(trained, ens.initial, ens.grid, "euler")

    def test_two_cluster_crossing_small(self):
        ens = two_cluster_crossing(400, 10)
        resampled = self.resample(ens, hidden=32, steps=1500)
        for j in range(ens.grid.m + 1):
            assert w2_1d(ens.states[:, j, 0], resampled.states[:, j, 0]) <= 0.08
        assert dynamic_cost(resampled) <= dynamic_cost(ens) + 0.02

    @pytest.mark.slow
    def test_two_cluster_crossing(self):
        ens = two_cluster_crossing(1000, 20)
        resampled = self.resample(ens, hidden=64, steps=2000)
        for j in range(ens.grid.m + 1):
            assert w2_1d(ens.states[:, j, 0], resampled.states[:, j, 0]) <= 0.05
        assert dynamic_cost(resampled) <= dynamic_cost(ens) + 0.01
