"""Tests for particleopt module."""

import numpy as np
import pytest

from particle_mfg.couplings import (
    KernelInteraction,
    PopulationSnapshot,
    QuadraticPotential,
    QuadraticTerminal,
    ZeroCoupling,
    coupling_grad,
    snapshots,
)
from particle_mfg.ensemble import ParticleEnsemble, TimeGrid, dynamic_cost, init_trajectories
from particle_mfg.errors import ConfigurationError, OptimizationError
from particle_mfg.particleopt import (
    objective,
    particle_step,
    proximal_norm_sq,
    proximal_solve,
    residual,
)
from particle_mfg.solver import quadratic_oc_oracle, solve_discrete_oc

ZERO = ZeroCoupling()
QUAD = QuadraticPotential(1.0)


def lines(starts, slopes, m):
    grid = TimeGrid(m)
    a = np.asarray(starts, dtype=np.float64)[:, None, :]
    s = np.asarray(slopes, dtype=np.float64)[:, None, :]
    return ParticleEnsemble(grid=grid, states=a + grid.nodes[None, :, None] * s)


def constant_start(m, x0=1.0):
    return init_trajectories(np.array([[x0]]), TimeGrid(m))


class TestObjective:
    """objective 関数のテスト"""

    def test_zero_constant(self):
        ens = init_trajectories(np.ones((4, 2)), TimeGrid(5))
        obj = objective(ens, ZERO, ZERO, None)
        assert obj.total == 0.0

    def test_quadratic_terminal(self):
        """全粒子が x2 = 0 で終わると G = (0 - (-1))^2 = 1"""
        ens = lines([[0.0, 3.0], [1.0, -2.0]], [[0.0, -3.0], [1.0, 2.0]], 6)
        obj = objective(ens, ZERO, QuadraticTerminal(1.0, -1.0, 1), None)
        assert obj.terminal == pytest.approx(1.0)
        assert obj.interaction == 0.0

    def test_crossing_total_is_dynamic(self):
        ens = lines([[0.0], [1.0]], [[1.0], [-1.0]], 4)
        obj = objective(ens, ZERO, ZERO, snapshots(ens))
        assert obj.total == obj.dynamic == pytest.approx(dynamic_cost(ens))
        assert obj.total == pytest.approx(0.5)

    def test_total_is_exact_sum(self):
        rng = np.random.default_rng(0)
        ens = ParticleEnsemble(grid=TimeGrid(5), states=rng.standard_normal((6, 6, 2)))
        obj = objective(ens, KernelInteraction(1.0, (0.5, 0.5)), QUAD, snapshots(ens))
        assert obj.total == obj.dynamic + obj.interaction + obj.terminal

    def test_interaction_weighting(self):
        """interaction = (dt/n) Σ_i Σ_{j=1..m} F(X_{i,t_j})"""
        ens = init_trajectories(np.array([[2.0], [0.0]]), TimeGrid(4))
        obj = objective(ens, QUAD, ZERO, None)
        # F = ½x^2: 粒子1は 2, 粒子2は 0, 全時刻で m·dt = 1
        assert obj.interaction == pytest.approx(1.0)

    def test_missing_snapshot(self):
        ens = init_trajectories(np.zeros((2, 1)), TimeGrid(3))
        with pytest.raises(ConfigurationError):
            objective(ens, KernelInteraction(1.0, (1.0,)), ZERO, {1: snapshots(ens)[1]})


class TestParticleStep:
    """particle_step 関数のテスト"""

    def test_straight_line_terminal_drift(self):
        ens = lines([[0.0]], [[1.0]], 5)
        updated = particle_step(ens, ZERO, ZERO, None, beta=0.1)
        np.testing.assert_allclose(updated.states[0, :-1], ens.states[0, :-1], atol=1e-12)
        assert updated.states[0, -1, 0] == pytest.approx(1.0 - 0.1)

    def test_constant_is_fixed_point(self):
        ens = init_trajectories(np.array([[0.3, 2.0]]), TimeGrid(4))
        assert np.array_equal(particle_step(ens, ZERO, ZERO, None, beta=0.5).states, ens.states)

    def test_initial_node_untouched(self):
        rng = np.random.default_rng(1)
        ens = ParticleEnsemble(grid=TimeGrid(6), states=rng.standard_normal((4, 7, 2)))
        updated = particle_step(ens, QUAD, QUAD, None, beta=0.01)
        assert np.array_equal(updated.initial, ens.initial)

    def test_batch_changes_only_selected(self):
        rng = np.random.default_rng(2)
        ens = ParticleEnsemble(grid=TimeGrid(5), states=rng.standard_normal((4, 6, 1)))
        updated = particle_step(ens, QUAD, QUAD, None, beta=0.01, batch=np.array([2]))
        changed = np.any(updated.states != ens.states, axis=(1, 2))
        assert changed.tolist() == [False, False, True, False]
        assert np.array_equal(updated.states[2, 0], ens.states[2, 0])

    def test_jacobi_update(self):
        """差分は全て更新前の状態から計算する"""
        grid = TimeGrid(3)
        x = np.array([0.0, 1.0, -1.0, 2.0])
        ens = ParticleEnsemble(grid=grid, states=x[None, :, None])
        beta, dt = 0.01, grid.dt
        expected = x.copy()
        for j in (1, 2):
            expected[j] = x[j] - beta * dt * (-(x[j + 1] - 2 * x[j] + x[j - 1]) / dt**2)
        expected[3] = x[3] - beta * (x[3] - x[2]) / dt
        np.testing.assert_allclose(particle_step(ens, ZERO, ZERO, None, beta).states[0, :, 0], expected)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        ens = ParticleEnsemble(grid=TimeGrid(5), states=rng.standard_normal((8, 6, 2)))
        F = KernelInteraction(0.5, (1.0, -0.5))
        pop = snapshots(ens)
        order = rng.permutation(8)
        a = particle_step(ens, F, QUAD, pop, beta=0.01).permuted(order)
        b = particle_step(ens.permuted(order), F, QUAD, pop, beta=0.01)
        np.testing.assert_allclose(a.states, b.states, rtol=1e-14, atol=1e-14)

    def test_requires_two_steps(self):
        with pytest.raises(ConfigurationError):
            particle_step(constant_start(1), ZERO, ZERO, None, beta=0.1)

    def test_beta_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            particle_step(constant_start(4), ZERO, ZERO, None, beta=0.0)

    def test_divergence_reports_node(self):
        ens = init_trajectories(np.zeros((2, 1)), TimeGrid(4))
        ens.states[1, 2, 0] = 1.5e308
        with pytest.raises(OptimizationError) as exc:
            particle_step(ens, ZERO, ZERO, None, beta=1.0)
        assert exc.value.particle == 1

    def test_full_batch_descent(self):
        """凍結した母集団で全バッチの更新は目的関数を増やさない"""
        rng = np.random.default_rng(4)
        grid = TimeGrid(10)
        ens = ParticleEnsemble(grid=grid, states=rng.standard_normal((5, 11, 2)))
        ens.states[:, 0] = 0.0
        G = QuadraticTerminal(1.0, -1.0, 1)
        beta = 0.2 * grid.dt
        previous = objective(ens, ZERO, G, None).total
        for _ in range(50):
            ens = particle_step(ens, ZERO, G, None, beta)
            current = objective(ens, ZERO, G, None).total
            assert current <= previous * (1 + 1e-12)
            previous = current


class TestResidual:
    """residual 関数のテスト"""

    def test_zero_constant(self):
        assert residual(init_trajectories(np.ones((3, 2)), TimeGrid(4)), ZERO, ZERO, None) == 0.0

    @pytest.mark.parametrize("slope", [1.0, -2.5])
    def test_straight_lines(self, slope):
        ens = lines([[0.0], [3.0]], [[slope], [slope]], 8)
        assert residual(ens, ZERO, ZERO, None) == pytest.approx(abs(slope))

    @pytest.mark.parametrize("m", [20, 50, 100])
    def test_oracle_discretization_floor(self, m):
        """解析解 e^{-t} の残差は後退差分の終端条件による (dt/2)·e^{-1} 程度"""
        ens = quadratic_oc_oracle(1.0, 1.0, 1.0, TimeGrid(m))
        value = residual(ens, QUAD, QUAD, None)
        assert value <= 0.05
        assert 0.18 <= value / ens.grid.dt <= 0.19

    def test_discrete_solution_is_stationary(self):
        ens = solve_discrete_oc(1.0, 1.0, np.array([[1.0], [-0.5]]), TimeGrid(30))
        assert residual(ens, QUAD, QUAD, None) < 1e-9


class TestKernelGameEquilibrium:
    """非対称カーネル + 2次終端コストのゲームの停留点"""

    KERNEL = KernelInteraction(10.0, (0.0, 1.0))
    TERMINAL = QuadraticTerminal(1.0, -1.0, 1)

    @staticmethod
    def collapsed(m, n=3):
        """全員が x2(t) = 1 + v t + 5 t^2 を通る (x1 = 0) 母集団"""
        grid = TimeGrid(m)
        t = grid.nodes
        v = (5.0 * grid.dt - 24.0) / 3.0
        states = np.zeros((n, m + 1, 2))
        states[:, :, 1] = 1.0 + v * t + 5.0 * t**2
        return ParticleEnsemble(grid=grid, states=states)

    @pytest.mark.parametrize("m", [10, 20, 40])
    def test_collapsed_population_is_stationary(self, m):
        """1点に集まった母集団では ∇F = λ_F a なので x2'' = 10 の2次式が停留点, 終端は -2 + 5dt/3"""
        ens = self.collapsed(m)
        assert residual(ens, self.KERNEL, self.TERMINAL, snapshots(ens)) < 1e-9
        np.testing.assert_allclose(ens.terminal[:, 1], -2.0 + 5.0 * ens.grid.dt / 3.0, atol=1e-12)

    def test_mean_interaction_gradient_at_least_lambda(self):
        """母集団自身で平均した ∂F/∂x2 は λ_F 以上 (停留点の終端平均は上の値より下になる)"""
        rng = np.random.default_rng(4)
        for scale in (0.01, 0.3, 1.0):
            points = rng.normal([0.0, 1.0], scale, size=(500, 2))
            grads = coupling_grad(self.KERNEL, PopulationSnapshot(0, points), points)
            assert grads[:, 1].mean() >= 10.0
            np.testing.assert_array_equal(grads[:, 0], 0.0)


class TestProximalSolve:
    """proximal_solve 関数のテスト"""

    def test_zero_steps_rejected(self):
        with pytest.raises(ConfigurationError):
            proximal_solve(constant_start(4), ZERO, ZERO, None, inner_steps=0, beta=0.1)

    def test_dynamic_cost_decreases(self):
        ens = lines([[0.0], [1.0]], [[1.0], [-1.0]], 10)
        beta = 0.2 * ens.grid.dt
        previous = dynamic_cost(ens)
        for _ in range(20):
            ens = proximal_solve(ens, ZERO, ZERO, None, inner_steps=1, beta=beta)
            current = dynamic_cost(ens)
            assert current < previous
            previous = current

    def test_deterministic_minibatches(self):
        rng = np.random.default_rng(5)
        ens = ParticleEnsemble(grid=TimeGrid(6), states=rng.standard_normal((10, 7, 2)))
        a = proximal_solve(ens, QUAD, QUAD, None, 30, 0.01, batch_size=3, seed=7)
        b = proximal_solve(ens, QUAD, QUAD, None, 30, 0.01, batch_size=3, seed=7)
        assert np.array_equal(a.states, b.states)

    def test_minibatch_pass_covers_every_particle(self):
        """1パス (n/n1 回) で全粒子がちょうど1回ずつ更新される"""
        ens = lines(np.zeros((6, 1)), np.ones((6, 1)), 4)
        out = proximal_solve(ens, ZERO, ZERO, None, 3, 0.1, batch_size=2, seed=0)
        np.testing.assert_allclose(out.terminal[:, 0], 1.0 - 0.1)

    def test_explicit_proximal_requires_alpha(self):
        with pytest.raises(ConfigurationError):
            proximal_solve(constant_start(4), QUAD, QUAD, None, 1, 0.01, explicit_proximal=True)


class TestQuadraticOracle:
    """2次最適制御の解析解との比較"""

    def test_dense_discrete_solve_matches_oracle(self):
        grid = TimeGrid(2000)
        dense = solve_discrete_oc(1.0, 1.0, 1.0, grid, terminal="central")
        oracle = quadratic_oc_oracle(1.0, 1.0, 1.0, grid)
        assert np.abs(dense.states - oracle.states).max() <= 1e-6

    def test_oracle_boundary_conditions(self):
        ens = quadratic_oc_oracle(2.0, 0.5, 1.5, TimeGrid(4000))
        X = ens.states[0, :, 0]
        dt = ens.grid.dt
        assert X[0] == pytest.approx(1.5)
        slope = (3 * X[-1] - 4 * X[-2] + X[-3]) / (2 * dt)
        assert slope == pytest.approx(-0.5 * X[-1], abs=1e-5)

    def test_particle_updates_converge_to_oracle(self):
        """定数軌道から粒子更新を繰り返すと解析解に収束する"""
        grid = TimeGrid(50)
        ens = proximal_solve(constant_start(50), QUAD, QUAD, None, inner_steps=20000,
                             beta=0.4 * grid.dt)
        oracle = quadratic_oc_oracle(1.0, 1.0, 1.0, grid)
        assert np.abs(ens.states - oracle.states).max() <= 5e-3
        discrete = solve_discrete_oc(1.0, 1.0, 1.0, grid)
        assert np.abs(ens.states - discrete.states).max() <= 1e-4


class TestProximalConvergence:
    """明示的な近接項を使った外側反復の収束"""

    @pytest.mark.parametrize("alpha", [0.05, 0.1])
    def test_linear_contraction(self, alpha):
        grid = TimeGrid(50)
        target = solve_discrete_oc(1.0, 1.0, 1.0, grid)
        ens = constant_start(50)
        errors = [np.sqrt(proximal_norm_sq(ens, target))]
        for _ in range(10):
            ens = proximal_solve(ens, QUAD, QUAD, None, inner_steps=2000, beta=0.4 * grid.dt,
                                 alpha=alpha, explicit_proximal=True)
            errors.append(np.sqrt(proximal_norm_sq(ens, target)))

        ratios = np.array(errors[1:]) / np.array(errors[:-1])
        assert np.all(np.diff(errors) < 0)
        assert ratios.max() <= 1.0 / (1.0 + 2.0 * 1.0 * alpha) + 0.1

    def test_stationarity_rate(self):
        """min_ℓ |X^(ℓ+1) - X^(ℓ)|^2 は C/K 以上の速さで減る"""
        grid = TimeGrid(20)
        ens = constant_start(20)
        displacement = []
        for _ in range(80):
            nxt = proximal_solve(ens, QUAD, QUAD, None, inner_steps=500, beta=0.2 * grid.dt,
                                 alpha=0.02, explicit_proximal=True)
            displacement.append(proximal_norm_sq(nxt, ens))
            ens = nxt
        ks = np.array([10, 20, 40, 80])
        best = np.array([min(displacement[:k]) for k in ks])
        slope = np.polyfit(np.log(ks), np.log(best), 1)[0]
        assert slope <= -0.9

    def test_norm_weights(self):
        """内部ノードは dt, 終端ノードは1の重み"""
        grid = TimeGrid(4)
        a = init_trajectories(np.zeros((1, 1)), grid)
        b = a.copy()
        b.states[0, 1:] = 1.0
        assert proximal_norm_sq(a, b) == pytest.approx(3 * grid.dt + 1.0)

    def test_norm_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            proximal_norm_sq(np.zeros((1, 3, 1)), np.zeros((1, 4, 1)))
