#!/usr/bin/env python3
"""
粒子軌道の最適化
- 離散化した個別目的関数 J(X; ρ) の評価
- 粒子の勾配更新 (内部ノードは βdt, 終端ノードは β)
- 1次の残差 (離散オイラー・ラグランジュ方程式と横断条件の欠差)
"""

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .couplings import (
    CouplingSpec,
    PopulationSnapshot,
    coupling_grad,
    coupling_value,
    needs_population,
    population_for,
)
from .ensemble import ParticleEnsemble, SeedLike, accelerations, dynamic_cost, velocities
from .errors import ConfigurationError, OptimizationError

logger = logging.getLogger(__name__)

Population = Union[Sequence[PopulationSnapshot], Mapping[int, PopulationSnapshot], None]


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """J = 運動エネルギー + 相互作用 + 終端コスト"""
    dynamic: float
    interaction: float
    terminal: float

    @property
    def total(self) -> float:
        return self.dynamic + self.interaction + self.terminal


def _snapshot(pop: Population, j: int) -> PopulationSnapshot:
    snap = population_for(pop, j)
    if snap is None:
        raise ConfigurationError(f"時刻 t_{j} の母集団スナップショットがありません")
    return snap


def _field(spec: CouplingSpec, pop: Population, X: np.ndarray, times: range, grad: bool) -> np.ndarray:
    """
    結合の値または勾配を X[:, k] (時刻 times[k]) でまとめて評価

    Args:
        X: shape (b, len(times), d)

    Returns:
        値なら shape (b, len(times)), 勾配なら X と同じ形
    """
    b, J, d = X.shape
    evaluate = coupling_grad if grad else coupling_value
    if not needs_population(spec):
        out = evaluate(spec, None, X.reshape(-1, d))
        return out.reshape((b, J, d) if grad else (b, J))

    out = np.empty((b, J, d) if grad else (b, J))
    for k, j in enumerate(times):
        out[:, k] = evaluate(spec, _snapshot(pop, j), X[:, k])
    return out


def _check_m(ens: ParticleEnsemble) -> None:
    if ens.grid.m < 2:
        raise ConfigurationError(f"粒子更新には m >= 2 が必要です: m={ens.grid.m}")


def _stationarity_terms(
    ens: ParticleEnsemble, coupling_F: CouplingSpec, coupling_G: CouplingSpec, pop: Population
) -> tuple[np.ndarray, np.ndarray]:
    """
    内部ノードの -D_tt X + ∇F と終端ノードの D_t X + ∇G

    Returns:
        (shape (n, m-1, d), shape (n, d))
    """
    X, m = ens.states, ens.grid.m
    interior = -accelerations(ens) + _field(coupling_F, pop, X[:, 1:m], range(1, m), grad=True)
    slope = velocities(ens)[:, -1]
    terminal = slope + _field(coupling_G, pop, X[:, m:m + 1], range(m, m + 1), grad=True)[:, 0]
    return interior, terminal


def objective(
    ens: ParticleEnsemble,
    coupling_F: CouplingSpec,
    coupling_G: CouplingSpec,
    pop: Population,
) -> ObjectiveBreakdown:
    """
    J(X; ρ) を評価

    interaction = (dt/n) Σ_i Σ_{j=1..m} F[ρ_{t_j}](X_{i,t_j}),
    terminal = (1/n) Σ_i G[ρ_{t_m}](X_{i,t_m})

    Args:
        ens: 粒子アンサンブル
        coupling_F: 相互作用コスト
        coupling_G: 終端コスト
        pop: 時刻インデックス -> スナップショット (固定した参照母集団)

    Returns:
        ObjectiveBreakdown
    """
    if ens.n == 0:
        return ObjectiveBreakdown(0.0, 0.0, 0.0)
    m, dt = ens.grid.m, ens.grid.dt
    X = ens.states
    F_vals = _field(coupling_F, pop, X[:, 1:], range(1, m + 1), grad=False)
    G_vals = _field(coupling_G, pop, X[:, m:m + 1], range(m, m + 1), grad=False)
    return ObjectiveBreakdown(
        dynamic=dynamic_cost(ens),
        interaction=float(dt / ens.n * np.sum(F_vals)),
        terminal=float(np.sum(G_vals) / ens.n),
    )


def particle_step(
    ens: ParticleEnsemble,
    coupling_F: CouplingSpec,
    coupling_G: CouplingSpec,
    pop: Population,
    beta: float,
    batch: Optional[np.ndarray] = None,
    proximal_alpha: Optional[float] = None,
    anchor: Optional[ParticleEnsemble] = None,
) -> ParticleEnsemble:
    """
    粒子軌道の勾配更新を1回行う

    内部ノード j=1..m-1: X_j ← X_j - βdt(-(D_tt X)_j + ∇F[ρ_{t_j}](X_j))
    終端ノード:           X_m ← X_m - β((D_t X)_m + ∇G[ρ_{t_m}](X_m))
    差分は全て更新前の状態から計算する。j=0 は変更しない。

    proximal_alpha を指定すると (1/α)(X - anchor) を両方の勾配に加える。

    Args:
        ens: 粒子アンサンブル
        coupling_F: 相互作用コスト
        coupling_G: 終端コスト
        pop: 時刻インデックス -> スナップショット
        beta: ステップ幅 (正)
        batch: 更新する粒子のインデックス (省略時は全粒子)
        proximal_alpha: 明示的な近接項の重み α
        anchor: 近接項の中心 (proximal_alpha 指定時に必須)

    Returns:
        更新後の新しいアンサンブル
    """
    if not beta > 0.0:
        raise ConfigurationError(f"beta は正の値が必要です: {beta}")
    _check_m(ens)
    if ens.n == 0:
        return ens.copy()

    idx = np.arange(ens.n) if batch is None else np.asarray(batch, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= ens.n):
        raise ConfigurationError(f"バッチのインデックスが範囲外です (n={ens.n})")

    m, dt = ens.grid.m, ens.grid.dt
    Xb = ens.states[idx]
    interior, terminal = _stationarity_terms(ParticleEnsemble(grid=ens.grid, states=Xb),
                                             coupling_F, coupling_G, pop)

    if proximal_alpha is not None:
        if not proximal_alpha > 0.0:
            raise ConfigurationError(f"近接項の alpha は正の値が必要です: {proximal_alpha}")
        if anchor is None:
            raise ConfigurationError("近接項を使うには anchor が必要です")
        A = anchor.states[idx]
        interior = interior + (Xb[:, 1:m] - A[:, 1:m]) / proximal_alpha
        terminal = terminal + (Xb[:, m] - A[:, m]) / proximal_alpha

    states = ens.states.copy()
    states[idx, 1:m] = Xb[:, 1:m] - beta * dt * interior
    states[idx, m] = Xb[:, m] - beta * terminal

    updated = states[idx]
    if not np.all(np.isfinite(updated)):
        bad_i, bad_j = np.argwhere(~np.all(np.isfinite(updated), axis=2))[0]
        raise OptimizationError(particle=int(idx[bad_i]), node=int(bad_j))

    return ParticleEnsemble(grid=ens.grid, states=states)


def proximal_solve(
    ens: ParticleEnsemble,
    coupling_F: CouplingSpec,
    coupling_G: CouplingSpec,
    pop: Population,
    inner_steps: int,
    beta: float,
    batch_size: Optional[int] = None,
    seed: SeedLike = None,
    alpha: Optional[float] = None,
    explicit_proximal: bool = False,
) -> ParticleEnsemble:
    """
    particle_step を L1 回適用する

    ミニバッチは1パスごとに粒子の並び替えから n1 個ずつ取り出す (パス内は非復元)。

    Args:
        ens: 開始時のアンサンブル
        coupling_F: 相互作用コスト
        coupling_G: 終端コスト
        pop: 固定した参照母集団
        inner_steps: 更新回数 L1 (1以上)
        beta: ステップ幅
        batch_size: ミニバッチの粒子数 n1 (省略時または n 以上でフルバッチ)
        seed: ミニバッチ選択の乱数シード
        alpha: 近接項の重み (explicit_proximal でなければ記録のみ)
        explicit_proximal: (1/α)(X - X_entry) を勾配に加える

    Returns:
        更新後のアンサンブル
    """
    if inner_steps < 1:
        raise ConfigurationError(f"L1 は1以上が必要です: {inner_steps}")
    if explicit_proximal and alpha is None:
        raise ConfigurationError("明示的な近接項には alpha が必要です")
    n = ens.n
    n1 = n if batch_size is None else int(batch_size)
    if batch_size is not None and n1 < 1:
        raise ConfigurationError(f"n1 は1以上が必要です: {n1}")

    rng = np.random.default_rng(seed)
    anchor = ens if explicit_proximal else None
    prox = alpha if explicit_proximal else None
    order = np.empty(0, dtype=np.int64)
    pos = 0
    current = ens

    for _ in range(inner_steps):
        batch = None
        if n1 < n:
            if pos + n1 > order.size:
                order = rng.permutation(n)
                pos = 0
            batch = order[pos:pos + n1]
            pos += n1
        current = particle_step(current, coupling_F, coupling_G, pop, beta, batch,
                                proximal_alpha=prox, anchor=anchor)

    logger.debug(f"proximal_solve: L1={inner_steps}, n1={min(n1, n)}, beta={beta}, alpha={alpha}")
    return current


def residual(
    ens: ParticleEnsemble,
    coupling_F: CouplingSpec,
    coupling_G: CouplingSpec,
    pop: Population,
) -> float:
    """
    1次の残差

    sqrt( (dt/n) Σ_i Σ_{j=1..m-1} |-(D_tt X_i)_j + ∇F|^2 + (1/n) Σ_i |(D_t X_i)_m + ∇G|^2 )

    Args:
        ens: 粒子アンサンブル
        coupling_F: 相互作用コスト
        coupling_G: 終端コスト
        pop: 時刻インデックス -> スナップショット

    Returns:
        残差 (停留点で0)
    """
    _check_m(ens)
    if ens.n == 0:
        return 0.0
    interior, terminal = _stationarity_terms(ens, coupling_F, coupling_G, pop)
    total = ens.grid.dt / ens.n * np.sum(interior * interior) + np.sum(terminal * terminal) / ens.n
    return float(np.sqrt(total))


def proximal_norm_sq(a: ParticleEnsemble | np.ndarray, b: ParticleEnsemble | np.ndarray) -> float:
    """
    軌道空間のノルム (dt/n) Σ_i Σ_{j=1..m-1} |a - b|^2 + (1/n) Σ_i |a_m - b_m|^2

    Args:
        a, b: 同じ形のアンサンブル (または shape (n, m+1, d) の配列)

    Returns:
        2乗ノルム
    """
    A = a.states if isinstance(a, ParticleEnsemble) else np.asarray(a, dtype=np.float64)
    B = b.states if isinstance(b, ParticleEnsemble) else np.asarray(b, dtype=np.float64)
    if A.shape != B.shape:
        raise ConfigurationError(f"形状が一致しません: {A.shape} != {B.shape}")
    n, m = A.shape[0], A.shape[1] - 1
    if n == 0:
        return 0.0
    diff = A - B
    interior = diff[:, 1:m]
    return float(np.sum(interior * interior) / (m * n) + np.sum(diff[:, m] ** 2) / n)
