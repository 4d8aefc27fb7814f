#!/usr/bin/env python3
"""
結合コスト F[ρ_t](x), G[ρ_1](x) とその勾配の経験推定
- 指数カーネル相互作用 λ_F ∫ exp(a^T(x-y)) dρ(y) (非対称, 非ポテンシャル型)
- 2次終端コスト λ_G (x_k - c)^2
- 2次ポテンシャル (λ/2)|x - center|^2
- KL 終端コスト (分類器のロジットで log dρ/dν を推定)
- 架空プレイ用の母集団混合
"""

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .ensemble import (
    EmpiricalFile,
    InitialDistribution,
    ParticleEnsemble,
    SeedLike,
    load_points,
    sample_initial,
)
from .errors import ConfigurationError, CouplingOverflowError, TrainingError
from .neuralnet import MLP, adam_step, backward, forward, init_adam, init_mlp

logger = logging.getLogger(__name__)

# exp(a^T(x-y)) の指数の上限 (超えたら飽和させずにエラー)
KERNEL_EXPONENT_LIMIT = 50.0

# 混合重みの和の許容誤差
MASS_TOLERANCE = 1e-9


# ========== 結合の種類 ==========

@dataclass(frozen=True)
class KernelInteraction:
    """F[ρ](x) = λ_F ∫ exp(a^T(x-y)) dρ(y)"""
    lambda_F: float
    a: tuple[float, ...]

    def validate(self, d: Optional[int] = None) -> None:
        if not self.lambda_F >= 0.0:
            raise ConfigurationError(f"lambda_F は0以上が必要です: {self.lambda_F}")
        if len(self.a) == 0 or not any(self.a):
            raise ConfigurationError("カーネルの a は非ゼロベクトルが必要です")
        if d is not None and len(self.a) != d:
            raise ConfigurationError(f"a の次元 {len(self.a)} が状態次元 {d} と一致しません")


@dataclass(frozen=True)
class QuadraticTerminal:
    """G(x) = λ_G (x_k - c)^2"""
    lambda_G: float
    c: float
    index: int = 1

    def validate(self, d: Optional[int] = None) -> None:
        if not self.lambda_G >= 0.0:
            raise ConfigurationError(f"lambda_G は0以上が必要です: {self.lambda_G}")
        if self.index < 0 or (d is not None and self.index >= d):
            raise ConfigurationError(f"座標インデックス {self.index} が範囲外です (d={d})")


@dataclass(frozen=True)
class QuadraticPotential:
    """F または G = (λ/2)|x - center|^2 (center 省略時は原点)"""
    lam: float
    center: tuple[float, ...] = ()

    def validate(self, d: Optional[int] = None) -> None:
        if not self.lam >= 0.0:
            raise ConfigurationError(f"lam は0以上が必要です: {self.lam}")
        if self.center and d is not None and len(self.center) != d:
            raise ConfigurationError(f"center の次元 {len(self.center)} が状態次元 {d} と一致しません")


@dataclass(frozen=True)
class ClassifierConfig:
    """KL 終端コスト用分類器の構成と学習スケジュール"""
    hidden: tuple[int, ...] = (64, 64, 64)
    activation: str = "relu"
    init_steps: int = 1000  # エポック開始時の学習ステップ数
    every: int = 10         # 何回の粒子更新ごとに再学習するか
    steps: int = 20         # 再学習1回あたりのステップ数
    lr: float = 1e-3
    batch: int = 2048       # クラスごとのバッチサイズ

    def validate(self) -> None:
        if any(w < 1 for w in self.hidden):
            raise ConfigurationError(f"classifier.hidden は正の整数が必要です: {self.hidden}")
        if self.activation not in ("relu", "swish"):
            raise ConfigurationError(f"未対応の活性化関数です: {self.activation}")
        if self.init_steps < 0 or self.steps < 0:
            raise ConfigurationError("classifier のステップ数は0以上が必要です")
        if self.every < 1:
            raise ConfigurationError(f"classifier.every は1以上が必要です: {self.every}")
        if self.batch < 1:
            raise ConfigurationError(f"classifier.batch は1以上が必要です: {self.batch}")
        if not self.lr > 0.0:
            raise ConfigurationError(f"classifier.lr は正の値が必要です: {self.lr}")


@dataclass(frozen=True)
class KLTerminal:
    """G[ρ](x) = log dρ/dν(x). ν はターゲット分布 (またはサンプルファイル)"""
    target: InitialDistribution
    n_target: int = 4096
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def validate(self, d: Optional[int] = None) -> None:
        self.target.validate()
        if not isinstance(self.target, EmpiricalFile) and self.n_target < 1:
            raise ConfigurationError(f"ターゲットのサンプル数は1以上が必要です: {self.n_target}")
        if d is not None and self.target.dim != d:
            raise ConfigurationError(f"ターゲットの次元 {self.target.dim} が状態次元 {d} と一致しません")
        self.classifier.validate()


@dataclass(frozen=True, eq=False)
class LogitTerminal:
    """学習済み分類器のロジット r_φ(x) をそのまま G とする"""
    classifier: MLP

    def validate(self, d: Optional[int] = None) -> None:
        if self.classifier.widths[-1] != 1:
            raise ConfigurationError("分類器の出力幅は1が必要です")
        if d is not None and self.classifier.widths[0] != d:
            raise ConfigurationError(f"分類器の入力幅 {self.classifier.widths[0]} が状態次元 {d} と一致しません")


@dataclass(frozen=True)
class ZeroCoupling:
    """恒等的に0"""

    def validate(self, d: Optional[int] = None) -> None:
        return None


CouplingSpec = Union[
    KernelInteraction, QuadraticTerminal, QuadraticPotential, KLTerminal, LogitTerminal, ZeroCoupling
]


def needs_population(spec: CouplingSpec) -> bool:
    """評価に母集団スナップショットが必要か"""
    return isinstance(spec, KernelInteraction)


# ========== 母集団スナップショット ==========

@dataclass
class PopulationSnapshot:
    """
    時刻 t_j の経験分布 ρ_{t_j}

    segments/masses は架空プレイの混合台帳: サンプルは segments の大きさで
    成分に区切られ, 成分 k は質量 masses[k] を持つ。空なら一様重み。
    """
    time_index: int
    samples: np.ndarray  # shape (N, d)
    segments: tuple[int, ...] = ()
    masses: tuple[float, ...] = ()
    # a -> (min_y a^T y, Σ_y w_y exp(min - a^T y)). サンプルは作成後に変更しない前提
    _kernel_moments: dict[tuple[float, ...], tuple[float, float]] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] == 0:
            raise ConfigurationError(f"スナップショットは空でない (N, d) 配列が必要です: {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ConfigurationError(f"スナップショット t_{self.time_index} に非有限値が含まれています")
        if len(self.segments) != len(self.masses):
            raise ConfigurationError("segments と masses の長さが一致しません")
        if self.segments:
            if sum(self.segments) != self.samples.shape[0] or min(self.segments) < 1:
                raise ConfigurationError(f"segments {self.segments} がサンプル数と一致しません")
            if min(self.masses) < 0.0 or abs(sum(self.masses) - 1.0) > MASS_TOLERANCE:
                raise ConfigurationError(f"混合重みは非負で和が1である必要があります: {self.masses}")

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @property
    def weights(self) -> Optional[np.ndarray]:
        """サンプルごとの重み (台帳がなければ None = 一様平均)"""
        if not self.segments:
            return None
        sizes = np.asarray(self.segments)
        return np.repeat(np.asarray(self.masses) / sizes, sizes)

    def components(self) -> list[np.ndarray]:
        """成分ごとのサンプル"""
        if not self.segments:
            return [self.samples]
        return np.split(self.samples, np.cumsum(self.segments)[:-1])

    def kernel_moment(self, a: np.ndarray) -> tuple[float, float]:
        """
        指数カーネル用の (s_min, 重み付き平均 exp(s_min - a^T y))

        粒子更新の間は同じスナップショットが何度も評価されるのでキャッシュする。
        """
        key = tuple(float(v) for v in a)
        cached = self._kernel_moments.get(key)
        if cached is None:
            s_y = self.samples @ a
            weights = self.weights
            if weights is not None:
                keep = weights > 0.0
                s_y, weights = s_y[keep], weights[keep]
            s_min = float(s_y.min())
            tail = np.exp(s_min - s_y)  # 各項 <= 1
            avg = float(tail.mean()) if weights is None else float(np.dot(weights, tail))
            cached = (s_min, avg)
            self._kernel_moments[key] = cached
        return cached


def snapshots(ens: ParticleEnsemble) -> list[PopulationSnapshot]:
    """アンサンブルの各時刻スライスから PopulationSnapshot を作る (j = 0..m)"""
    return [PopulationSnapshot(time_index=j, samples=ens.states[:, j, :].copy())
            for j in range(ens.grid.m + 1)]


def mixture_snapshot(old: PopulationSnapshot, new: PopulationSnapshot, alpha: float) -> PopulationSnapshot:
    """
    ρ ← (1-α)ρ_old + α ρ_new

    Args:
        old: 現在の母集団
        new: 最適応答の母集団
        alpha: 混合率 [0, 1]

    Returns:
        混合台帳付きのスナップショット (質量0の成分は除く)
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha は [0, 1] が必要です: {alpha}")
    if old.d != new.d:
        raise ConfigurationError(f"次元が一致しません: {old.d} != {new.d}")
    if old.time_index != new.time_index:
        raise ConfigurationError(f"時刻が一致しません: t_{old.time_index} != t_{new.time_index}")

    parts: list[tuple[np.ndarray, float]] = []
    for snap, scale in ((old, 1.0 - alpha), (new, alpha)):
        masses = snap.masses or (1.0,)
        for samples, mass in zip(snap.components(), masses):
            if mass * scale > 0.0:
                parts.append((samples, mass * scale))

    return PopulationSnapshot(
        time_index=new.time_index,
        samples=np.concatenate([p[0] for p in parts], axis=0),
        segments=tuple(p[0].shape[0] for p in parts),
        masses=tuple(p[1] for p in parts),
    )


# ========== 指数カーネル ==========

def _as_points(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def kernel_F(spec: KernelInteraction, pop: PopulationSnapshot, x: np.ndarray) -> np.ndarray | float:
    """
    F[ρ](x) = λ_F · (重み付き) 平均_y exp(a^T(x - y))

    s_x = a^T x, s_y = a^T y と置き, exp(s_x - s_min)·Σ_y w_y exp(s_min - s_y) と分解して
    クエリ点 (k, d) をまとめて評価する。

    Args:
        spec: カーネル相互作用
        pop: 母集団スナップショット
        x: クエリ点 shape (d,) または (k, d)

    Returns:
        x が1点なら float, それ以外は shape (k,)
    """
    xb, single = _as_points(x)
    a = np.asarray(spec.a, dtype=np.float64)
    if xb.shape[1] != a.shape[0] or pop.d != a.shape[0]:
        raise ConfigurationError(f"次元が一致しません: x={xb.shape[1]}, a={a.shape[0]}, pop={pop.d}")

    s_x = xb @ a
    s_min, avg = pop.kernel_moment(a)
    if s_x.size:
        exponent = float(s_x.max() - s_min)
        if exponent > KERNEL_EXPONENT_LIMIT:
            raise CouplingOverflowError(exponent, KERNEL_EXPONENT_LIMIT)

    values = spec.lambda_F * np.exp(s_x - s_min) * avg
    return float(values[0]) if single else values


def kernel_grad_F(spec: KernelInteraction, pop: PopulationSnapshot, x: np.ndarray) -> np.ndarray:
    """∇_x F = a · F (∇_x exp(a^T(x-y)) = a exp(a^T(x-y)))"""
    xb, single = _as_points(x)
    values = np.atleast_1d(kernel_F(spec, pop, xb))
    grads = values[:, None] * np.asarray(spec.a, dtype=np.float64)[None, :]
    return grads[0] if single else grads


# ========== 2次コスト ==========

def quadratic_G(spec: QuadraticTerminal, x: np.ndarray) -> np.ndarray | float:
    """λ_G (x_k - c)^2"""
    xb, single = _as_points(x)
    spec.validate(xb.shape[1])
    values = spec.lambda_G * (xb[:, spec.index] - spec.c) ** 2
    return float(values[0]) if single else values


def quadratic_grad_G(spec: QuadraticTerminal, x: np.ndarray) -> np.ndarray:
    """座標 k だけ 2λ_G (x_k - c), 他は0"""
    xb, single = _as_points(x)
    spec.validate(xb.shape[1])
    grads = np.zeros_like(xb)
    grads[:, spec.index] = 2.0 * spec.lambda_G * (xb[:, spec.index] - spec.c)
    return grads[0] if single else grads


def _center(spec: QuadraticPotential, d: int) -> np.ndarray:
    spec.validate(d)
    return np.asarray(spec.center, dtype=np.float64) if spec.center else np.zeros(d)


def potential_value(spec: QuadraticPotential, x: np.ndarray) -> np.ndarray | float:
    xb, single = _as_points(x)
    diff = xb - _center(spec, xb.shape[1])
    values = 0.5 * spec.lam * np.sum(diff * diff, axis=1)
    return float(values[0]) if single else values


def potential_grad(spec: QuadraticPotential, x: np.ndarray) -> np.ndarray:
    xb, single = _as_points(x)
    grads = spec.lam * (xb - _center(spec, xb.shape[1]))
    return grads[0] if single else grads


# ========== KL 終端コスト ==========

def kl_target_samples(spec: KLTerminal, seed: SeedLike = None) -> np.ndarray:
    """ターゲット ν のサンプル (ファイルなら全点, 分布なら n_target 点)"""
    spec.target.validate()
    if isinstance(spec.target, EmpiricalFile):
        return load_points(spec.target.path)
    return sample_initial(spec.target, spec.n_target, seed)


def init_classifier(spec: KLTerminal, d: int, seed: SeedLike = None) -> MLP:
    """スカラー出力の分類器 r_φ を初期化"""
    cfg = spec.classifier
    return init_mlp((d, *cfg.hidden, 1), cfg.activation, seed=seed)


def kl_train_classifier(
    spec: KLTerminal,
    pop: PopulationSnapshot,
    steps: int,
    batch: int,
    lr: float,
    seed: SeedLike = None,
    target: Optional[np.ndarray] = None,
    net: Optional[MLP] = None,
) -> tuple[MLP, list[float]]:
    """
    ロジスティック損失で分類器を学習 (ラベル1: pop, ラベル0: ν)

    損失はクラスごとの平均の和 mean softplus(-r(pop)) + mean softplus(r(ν)) で,
    最適なロジットは log dρ/dν になる。

    Args:
        spec: KL 終端コスト
        pop: 終端時刻の母集団 (混合台帳があれば重み付き)
        steps: Adam ステップ数
        batch: クラスごとのバッチサイズ (サンプル数以上なら全件)
        lr: 学習率
        seed: 乱数シード
        target: ν のサンプル (省略時は kl_target_samples で生成)
        net: 続きから学習する分類器 (省略時は新規初期化)

    Returns:
        (学習済み分類器, ステップごとの損失)
    """
    if steps < 0:
        raise ConfigurationError(f"steps は0以上が必要です: {steps}")
    if batch < 1:
        raise ConfigurationError(f"batch は1以上が必要です: {batch}")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_seed, target_seed, batch_seed = ss.spawn(3)

    if target is None:
        target = kl_target_samples(spec, target_seed)
    target = np.asarray(target, dtype=np.float64)
    if target.shape[0] == 0:
        raise ConfigurationError("ターゲットのサンプルが空です")
    if target.shape[1] != pop.d:
        raise ConfigurationError(f"ターゲットの次元 {target.shape[1]} が母集団の次元 {pop.d} と一致しません")

    net = init_classifier(spec, pop.d, init_seed) if net is None else net.copy()
    if steps == 0:
        return net, []

    rng = np.random.default_rng(batch_seed)
    weights = pop.weights
    state = init_adam(net.n_params, lr)
    params = net.get_flat()
    losses: list[float] = []

    for step in range(1, steps + 1):
        # ラベル1側 (母集団)
        if batch >= pop.size:
            xp = pop.samples
            wp = weights if weights is not None else np.full(pop.size, 1.0 / pop.size)
        else:
            idx = (rng.choice(pop.size, size=batch, replace=True, p=weights)
                   if weights is not None else rng.choice(pop.size, size=batch, replace=False))
            xp = pop.samples[idx]
            wp = np.full(batch, 1.0 / batch)
        # ラベル0側 (ターゲット)
        if batch >= target.shape[0]:
            xq = target
        else:
            xq = target[rng.choice(target.shape[0], size=batch, replace=False)]
        wq = np.full(xq.shape[0], 1.0 / xq.shape[0])

        rp = forward(net, xp)[:, 0]
        rq = forward(net, xq)[:, 0]
        loss = float(np.dot(wp, np.logaddexp(0.0, -rp)) + np.dot(wq, np.logaddexp(0.0, rq)))
        if not np.isfinite(loss):
            raise TrainingError("分類器の損失が非有限値になりました", step=step)

        grads_p, _ = backward(net, xp, (-wp * expit(-rp))[:, None])
        grads_q, _ = backward(net, xq, (wq * expit(rq))[:, None])
        params, state = adam_step(state, params, grads_p.flat() + grads_q.flat())
        net = net.set_flat(params)
        losses.append(loss)

    logger.debug(f"Classifier trained: steps={steps}, final loss={losses[-1]:.6g}")
    return net, losses


def kl_G(classifier: MLP, x: np.ndarray) -> np.ndarray | float:
    """G(x) = r_φ(x)"""
    xb, single = _as_points(x)
    values = forward(classifier, xb)[:, 0]
    return float(values[0]) if single else values


def kl_grad_G(classifier: MLP, x: np.ndarray) -> np.ndarray:
    """ロジットの入力勾配 ∇_x r_φ(x)"""
    xb, single = _as_points(x)
    _, grad_x = backward(classifier, xb, np.ones((xb.shape[0], 1)))
    return grad_x[0] if single else grad_x


# ========== 汎用ディスパッチ ==========

def coupling_value(spec: CouplingSpec, pop: Optional[PopulationSnapshot], x: np.ndarray) -> np.ndarray:
    """
    任意の結合の値を点群 x (k, d) で評価

    Returns:
        shape (k,)
    """
    xb, _ = _as_points(x)
    if isinstance(spec, ZeroCoupling):
        return np.zeros(xb.shape[0])
    if isinstance(spec, KernelInteraction):
        if pop is None:
            raise ConfigurationError("カーネル相互作用には母集団スナップショットが必要です")
        return np.atleast_1d(kernel_F(spec, pop, xb))
    if isinstance(spec, QuadraticTerminal):
        return np.atleast_1d(quadratic_G(spec, xb))
    if isinstance(spec, QuadraticPotential):
        return np.atleast_1d(potential_value(spec, xb))
    if isinstance(spec, LogitTerminal):
        return np.atleast_1d(kl_G(spec.classifier, xb))
    if isinstance(spec, KLTerminal):
        raise ConfigurationError("KLTerminal は kl_train_classifier で学習した LogitTerminal として評価してください")
    raise ConfigurationError(f"未対応の結合です: {type(spec).__name__}")


def coupling_grad(spec: CouplingSpec, pop: Optional[PopulationSnapshot], x: np.ndarray) -> np.ndarray:
    """
    任意の結合の勾配を点群 x (k, d) で評価

    Returns:
        shape (k, d)
    """
    xb, _ = _as_points(x)
    if isinstance(spec, ZeroCoupling):
        return np.zeros_like(xb)
    if isinstance(spec, KernelInteraction):
        if pop is None:
            raise ConfigurationError("カーネル相互作用には母集団スナップショットが必要です")
        return kernel_grad_F(spec, pop, xb)
    if isinstance(spec, QuadraticTerminal):
        return quadratic_grad_G(spec, xb)
    if isinstance(spec, QuadraticPotential):
        return potential_grad(spec, xb)
    if isinstance(spec, LogitTerminal):
        return kl_grad_G(spec.classifier, xb)
    if isinstance(spec, KLTerminal):
        raise ConfigurationError("KLTerminal は kl_train_classifier で学習した LogitTerminal として評価してください")
    raise ConfigurationError(f"未対応の結合です: {type(spec).__name__}")


def population_for(pop: Sequence[PopulationSnapshot] | Mapping[int, PopulationSnapshot] | None,
                   j: int) -> Optional[PopulationSnapshot]:
    """時刻インデックス j のスナップショットを取り出す (なければ None)"""
    if pop is None:
        return None
    if isinstance(pop, Mapping):
        return pop.get(j)
    return pop[j] if 0 <= j < len(pop) else None
