#!/usr/bin/env python3
"""
フローマッチング
- 最適化した粒子軌道の差分速度に v_θ(x, t) を回帰する
- 学習した速度場で ODE を積分して軌道を再サンプリングする
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .ensemble import ParticleEnsemble, SeedLike, TimeGrid
from .errors import ConfigurationError, IntegrationError, TrainingError
from .neuralnet import MLP, adam_step, backward, forward, init_adam

logger = logging.getLogger(__name__)


class IntegratorScheme(str, Enum):
    """ODE 積分法"""
    EULER = "euler"
    RK4 = "rk4"


@dataclass
class FMBatch:
    """回帰ペア (X_{t_{j-1}}, t_{j-1}) -> (X_{t_j} - X_{t_{j-1}})/dt"""
    x: np.ndarray       # shape (B, d)
    t: np.ndarray       # shape (B,)
    target: np.ndarray  # shape (B, d)


def fm_pairs(ens: ParticleEnsemble, indices: Optional[np.ndarray] = None) -> FMBatch:
    """
    アンサンブルから回帰ペアを作る (粒子単位で全時刻分)

    Args:
        ens: 粒子アンサンブル
        indices: 使う粒子のインデックス (省略時は全粒子)

    Returns:
        FMBatch (B = 粒子数 × m)
    """
    X = ens.states if indices is None else ens.states[np.asarray(indices)]
    dt = ens.grid.dt
    d = ens.d
    left = X[:, :-1, :]
    target = (X[:, 1:, :] - left) / dt
    t = np.broadcast_to(ens.grid.nodes[:-1], left.shape[:2])
    return FMBatch(x=left.reshape(-1, d), t=t.reshape(-1), target=target.reshape(-1, d))


def _check_velocity_net(net: MLP, d: int) -> None:
    expected_in = d + 1 if net.time_input else d
    if net.widths[0] != expected_in or net.widths[-1] != d:
        raise ConfigurationError(
            f"速度場の層幅 {net.widths} が状態次元 d={d} と一致しません "
            f"(入力 {expected_in}, 出力 {d} が必要)"
        )


def velocity_inputs(net: MLP, x: np.ndarray, t: np.ndarray | float) -> np.ndarray:
    """ネットワーク入力 [x; t] (time_input でなければ x のみ)"""
    if not net.time_input:
        return x
    t_col = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    return np.concatenate([x, t_col[:, None]], axis=1)


def velocity(net: MLP, x: np.ndarray, t: np.ndarray | float) -> np.ndarray:
    """v_θ(x, t) を点群 x (k, d) で評価"""
    return forward(net, velocity_inputs(net, x, t))


def fm_loss(net: MLP, ens: ParticleEnsemble) -> float:
    """
    (dt/n) Σ_i Σ_{j=1..m} |v_θ(X_{i,t_{j-1}}, t_{j-1}) - (X_{i,t_j} - X_{i,t_{j-1}})/dt|^2

    Args:
        net: 速度場
        ens: 粒子アンサンブル

    Returns:
        損失 (粒子数0なら0)
    """
    if ens.n == 0:
        return 0.0
    _check_velocity_net(net, ens.d)
    batch = fm_pairs(ens)
    diff = velocity(net, batch.x, batch.t) - batch.target
    return float(ens.grid.dt / ens.n * np.sum(diff * diff))


def fm_train(
    net: MLP,
    ens: ParticleEnsemble,
    steps: int,
    batch: int,
    lr: float,
    seed: SeedLike = None,
) -> tuple[MLP, list[float]]:
    """
    ミニバッチ Adam でフローマッチング損失を最小化

    ミニバッチは n2 本の軌道 (全時刻) を非復元抽出する。batch >= n ならフルバッチ。

    Args:
        net: 学習開始時の速度場 (変更しない)
        ens: 最適化済みの粒子アンサンブル
        steps: Adam ステップ数 L2
        batch: 軌道のバッチサイズ n2
        lr: 学習率
        seed: 乱数シード

    Returns:
        (学習後の速度場, ステップごとの損失)
    """
    if steps < 0:
        raise ConfigurationError(f"L2 は0以上が必要です: {steps}")
    if batch < 1:
        raise ConfigurationError(f"n2 は1以上が必要です: {batch}")
    net = net.copy()
    if steps == 0:
        return net, []
    if ens.n == 0:
        raise ConfigurationError("空のアンサンブルでは学習できません")
    _check_velocity_net(net, ens.d)

    rng = np.random.default_rng(seed)
    dt = ens.grid.dt
    full = fm_pairs(ens) if batch >= ens.n else None
    nb = min(batch, ens.n)
    state = init_adam(net.n_params, lr)
    params = net.get_flat()
    losses: list[float] = []

    for step in range(1, steps + 1):
        pairs = full if full is not None else fm_pairs(ens, rng.choice(ens.n, size=nb, replace=False))
        inputs = velocity_inputs(net, pairs.x, pairs.t)
        diff = forward(net, inputs) - pairs.target
        loss = float(dt / nb * np.sum(diff * diff))
        if not np.isfinite(loss):
            raise TrainingError("フローマッチング損失が非有限値になりました", step=step)

        grads, _ = backward(net, inputs, (2.0 * dt / nb) * diff)
        params, state = adam_step(state, params, grads.flat())
        net = net.set_flat(params)
        losses.append(loss)

        if step % 100 == 0:
            logger.debug(f"fm_train step {step}/{steps}: loss={loss:.6g}")

    return net, losses


def _integrate_chunk(net: MLP, x0: np.ndarray, grid: TimeGrid, scheme: IntegratorScheme,
                     offset: int) -> np.ndarray:
    dt = grid.dt
    nodes = grid.nodes
    out = np.empty((x0.shape[0], grid.m + 1, x0.shape[1]))
    out[:, 0] = x0
    x = x0
    for j in range(grid.m):
        t = nodes[j]
        if scheme == IntegratorScheme.EULER:
            x = x + dt * velocity(net, x, t)
        else:
            k1 = velocity(net, x, t)
            k2 = velocity(net, x + 0.5 * dt * k1, t + 0.5 * dt)
            k3 = velocity(net, x + 0.5 * dt * k2, t + 0.5 * dt)
            k4 = velocity(net, x + dt * k3, t + dt)
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            raise IntegrationError(particle=offset + int(np.argmax(bad)), step=j + 1)
        out[:, j + 1] = x
    return out


def integrate(
    net: MLP,
    x0: np.ndarray,
    grid: TimeGrid,
    scheme: IntegratorScheme | str = IntegratorScheme.EULER,
    workers: int = 1,
) -> ParticleEnsemble:
    """
    dX/dt = v_θ(X, t) を積分して軌道を作る

    粒子は互いに独立なので workers 個のスレッドに分割しても結果は同じ。

    Args:
        net: 速度場
        x0: 初期点 shape (n, d)
        grid: 時間グリッド
        scheme: "euler" または "rk4"
        workers: スレッド数

    Returns:
        ParticleEnsemble (states[:, 0] == x0)
    """
    try:
        scheme = IntegratorScheme(scheme)
    except ValueError as e:
        raise ConfigurationError(f"未対応の積分法です: {scheme}") from e
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2:
        raise ConfigurationError(f"x0 は shape (n, d) が必要です: {x0.shape}")
    n, d = x0.shape
    if n == 0:
        return ParticleEnsemble(grid=grid, states=np.zeros((0, grid.m + 1, d)))
    _check_velocity_net(net, d)

    workers = max(1, min(int(workers), n))
    if workers == 1:
        states = _integrate_chunk(net, x0, grid, scheme, 0)
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_integrate_chunk, net, x0[lo:hi], grid, scheme, int(lo))
                for lo, hi in zip(bounds[:-1], bounds[1:])
            ]
            states = np.concatenate([f.result() for f in futures], axis=0)

    states[:, 0] = x0
    return ParticleEnsemble(grid=grid, states=states)
