#!/usr/bin/env python3
"""
粒子軌道のデータモデル
- 時間グリッドと粒子アンサンブル X_{i,t_j}
- 初期分布のサンプラー (ガウス・チェッカーボード・経験分布ファイル)
- 軌道上の差分演算子 D_t, D_tt と運動エネルギー
- CSVへの保存・読み込み
"""

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .artifacts import atomic_write_text
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence, None]


@dataclass(frozen=True)
class TimeGrid:
    """一様時間グリッド t_j = j/m (j = 0..m)"""
    m: int  # ステップ数

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ConfigurationError(f"m は1以上の整数が必要です: {self.m}")

    @property
    def dt(self) -> float:
        return 1.0 / self.m

    @property
    def nodes(self) -> np.ndarray:
        # linspace なので t_0 = 0, t_m = 1 が厳密に成り立つ
        return np.linspace(0.0, 1.0, self.m + 1)


@dataclass
class ParticleEnsemble:
    """粒子軌道の集合 states[i, j] = X_{i,t_j}"""
    grid: TimeGrid
    states: np.ndarray  # shape (n, m+1, d), float64

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 3 or self.states.shape[1] != self.grid.m + 1:
            raise ValueError(
                f"states の形状 {self.states.shape} がグリッド m={self.grid.m} と合いません"
            )

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    @property
    def initial(self) -> np.ndarray:
        return self.states[:, 0, :]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(grid=self.grid, states=self.states.copy())

    def permuted(self, order: np.ndarray) -> "ParticleEnsemble":
        """粒子の並び替え"""
        return ParticleEnsemble(grid=self.grid, states=self.states[np.asarray(order)])


# ========== 初期分布 ==========

@dataclass(frozen=True)
class Gaussian:
    """対角共分散のガウス分布"""
    mean: tuple[float, ...]
    cov_diag: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.mean)

    def validate(self) -> None:
        if len(self.mean) == 0 or len(self.mean) != len(self.cov_diag):
            raise ConfigurationError(
                f"mean と cov_diag の次元が一致しません: {len(self.mean)} != {len(self.cov_diag)}"
            )
        if any(not np.isfinite(v) or v <= 0.0 for v in self.cov_diag):
            raise ConfigurationError(f"cov_diag は正の値が必要です: {self.cov_diag}")


@dataclass(frozen=True)
class Checkerboard:
    """[-extent/2, extent/2]^2 上のチェッカーボード分布 ((ix + iy) が偶数のセルが "on")"""
    cells: int = 4
    extent: float = 4.0

    @property
    def dim(self) -> int:
        return 2

    @property
    def cell_size(self) -> float:
        return self.extent / self.cells

    def validate(self) -> None:
        if self.cells < 2 or self.cells % 2 != 0:
            raise ConfigurationError(f"cells は正の偶数が必要です: {self.cells}")
        if not self.extent > 0.0:
            raise ConfigurationError(f"extent は正の値が必要です: {self.extent}")

    def on_cells(self) -> np.ndarray:
        """"on" セルのインデックス (ix, iy) の一覧"""
        ix, iy = np.meshgrid(np.arange(self.cells), np.arange(self.cells), indexing="ij")
        mask = (ix + iy) % 2 == 0
        return np.stack([ix[mask], iy[mask]], axis=1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """各点が "on" セルに入っているか"""
        points = np.atleast_2d(points)
        idx = np.floor((points + 0.5 * self.extent) / self.cell_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < self.cells), axis=1)
        return inside & ((idx[:, 0] + idx[:, 1]) % 2 == 0)


@dataclass(frozen=True)
class EmpiricalFile:
    """ファイルに保存された経験分布 (1行1粒子, カンマ区切り, ヘッダーなし)"""
    path: str

    @property
    def dim(self) -> int:
        return load_points(self.path).shape[1]

    def validate(self) -> None:
        if not Path(self.path).exists():
            raise ConfigurationError(f"経験分布ファイルが見つかりません: {self.path}")
        points = load_points(self.path)
        if points.shape[0] == 0:
            raise ConfigurationError(f"経験分布ファイルが空です: {self.path}")


InitialDistribution = Union[Gaussian, Checkerboard, EmpiricalFile]


def load_points(path: str | Path) -> np.ndarray:
    """
    ヘッダーなしCSVから点群を読み込む

    Args:
        path: ファイルパス

    Returns:
        shape (N, d) の配列
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"ファイルが見つかりません: {path}")
    try:
        points = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise ConfigurationError(f"数値として読めません: {e}", path=str(path)) from e
    if not np.all(np.isfinite(points)):
        raise ConfigurationError("非有限値が含まれています", path=str(path))
    return points


def sample_initial(dist: InitialDistribution, n: int, seed: SeedLike = None) -> np.ndarray:
    """
    初期分布から n 個を i.i.d. にサンプリング

    Args:
        dist: 初期分布
        n: サンプル数
        seed: 乱数シード (同じシードなら同じ結果)

    Returns:
        shape (n, d) の配列
    """
    if n < 0:
        raise ConfigurationError(f"n は0以上が必要です: {n}")
    dist.validate()
    rng = np.random.default_rng(seed)

    if isinstance(dist, Gaussian):
        mean = np.asarray(dist.mean, dtype=np.float64)
        std = np.sqrt(np.asarray(dist.cov_diag, dtype=np.float64))
        return mean + std * rng.standard_normal((n, dist.dim))

    if isinstance(dist, Checkerboard):
        # 棄却なし: "on" セルを一様に選び, セル内で一様サンプリング
        cells = dist.on_cells()
        chosen = cells[rng.integers(0, len(cells), size=n)]
        offset = rng.random((n, 2))
        return (chosen + offset) * dist.cell_size - 0.5 * dist.extent

    if isinstance(dist, EmpiricalFile):
        points = load_points(dist.path)
        return points[rng.integers(0, points.shape[0], size=n)].copy()

    raise ConfigurationError(f"未対応の初期分布です: {type(dist).__name__}")


def init_trajectories(x0: np.ndarray, grid: TimeGrid) -> ParticleEnsemble:
    """初期点を全時刻に複製した (時間方向に一定の) アンサンブル"""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2:
        raise ValueError(f"x0 は shape (n, d) が必要です: {x0.shape}")
    states = np.repeat(x0[:, None, :], grid.m + 1, axis=1)
    return ParticleEnsemble(grid=grid, states=states)


# ========== 差分演算子 ==========

def velocities(ens: ParticleEnsemble) -> np.ndarray:
    """全粒子の後退差分 (D_t X)_{t_j}, j = 1..m. shape (n, m, d)"""
    return np.diff(ens.states, axis=1) / ens.grid.dt


def accelerations(ens: ParticleEnsemble) -> np.ndarray:
    """全粒子の中心2階差分 (D_tt X)_{t_j}, j = 1..m-1. shape (n, m-1, d)"""
    if ens.grid.m < 2:
        raise ValueError("D_tt には m >= 2 が必要です")
    X = ens.states
    return (X[:, 2:] - 2.0 * X[:, 1:-1] + X[:, :-2]) / ens.grid.dt**2


def diff_t(ens: ParticleEnsemble, i: int) -> np.ndarray:
    """粒子 i の後退差分 (X_{t_j} - X_{t_{j-1}})/dt, j = 1..m"""
    return np.diff(ens.states[i], axis=0) / ens.grid.dt


def diff_tt(ens: ParticleEnsemble, i: int) -> np.ndarray:
    """粒子 i の中心2階差分 (X_{t_{j+1}} - 2X_{t_j} + X_{t_{j-1}})/dt^2, j = 1..m-1"""
    if ens.grid.m < 2:
        raise ValueError("D_tt には m >= 2 が必要です")
    X = ens.states[i]
    return (X[2:] - 2.0 * X[1:-1] + X[:-2]) / ens.grid.dt**2


def dynamic_cost(ens: ParticleEnsemble) -> float:
    """
    離散化した運動エネルギー (dt/n) Σ_i Σ_j ½|D_t X_i|^2

    Args:
        ens: アンサンブル

    Returns:
        運動エネルギー (粒子数0なら0)
    """
    if ens.n == 0:
        return 0.0
    v = velocities(ens)
    return float(ens.grid.dt / ens.n * 0.5 * np.sum(v * v))


# ========== CSV ==========

def ensemble_to_csv(ens: ParticleEnsemble) -> str:
    """particle_id, time_index, x_0..x_{d-1} 形式のCSV文字列"""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["particle_id", "time_index"] + [f"x_{k}" for k in range(ens.d)])
    for i in range(ens.n):
        for j in range(ens.grid.m + 1):
            writer.writerow([i, j] + [format(v, ".17g") for v in ens.states[i, j]])
    return buf.getvalue()


def save_ensemble_csv(ens: ParticleEnsemble, path: str | Path) -> Path:
    """アンサンブルをCSVにアトミックに保存"""
    return atomic_write_text(path, ensemble_to_csv(ens))


def load_ensemble_csv(path: str | Path) -> ParticleEnsemble:
    """
    save_ensemble_csv で保存したCSVを読み込む

    Args:
        path: CSVファイルのパス

    Returns:
        ParticleEnsemble
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"ファイルが見つかりません: {path}")

    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[:2] != ["particle_id", "time_index"]:
            raise ConfigurationError("ヘッダーが particle_id,time_index,x_0.. ではありません",
                                     path=str(path), line=1)
        d = len(header) - 2
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 2:
                raise ConfigurationError(f"列数が {d + 2} ではありません", path=str(path),
                                         line=lineno)
            rows.append(row)

    if not rows:
        raise ConfigurationError("データ行がありません", path=str(path))

    ids = np.array([int(r[0]) for r in rows])
    times = np.array([int(r[1]) for r in rows])
    values = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64)

    if ids.min() < 0 or times.min() < 0:
        raise ConfigurationError("particle_id / time_index に負の値があります", path=str(path))
    n, m = int(ids.max()) + 1, int(times.max())
    if len(rows) != n * (m + 1):
        raise ConfigurationError(f"行数 {len(rows)} が n*(m+1) = {n * (m + 1)} と一致しません",
                                 path=str(path))
    seen = np.zeros((n, m + 1), dtype=np.int64)
    np.add.at(seen, (ids, times), 1)
    if not np.all(seen == 1):
        i, j = np.argwhere(seen != 1)[0]
        raise ConfigurationError(
            f"(particle_id={i}, time_index={j}) の行が {seen[i, j]} 個あります (1個が必要)",
            path=str(path),
        )
    states = np.empty((n, m + 1, d))
    states[ids, times] = values
    logger.debug(f"Loaded ensemble n={n}, m={m}, d={d} from {path}")
    return ParticleEnsemble(grid=TimeGrid(m), states=states)
