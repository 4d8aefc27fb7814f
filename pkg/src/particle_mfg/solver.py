#!/usr/bin/env python3
"""
ソルバー本体
- 外側ループ: 再サンプリング → コスト更新 → 粒子更新 → フローマッチング
- 架空プレイ (母集団を混合していく比較用ループ)
- 2次最適制御の解析解と離散オイラー・ラグランジュ方程式の直接解法
- 1次元 Wasserstein-2 距離
"""

import logging
import time
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .config import SolverConfig
from .couplings import (
    CouplingSpec,
    KLTerminal,
    LogitTerminal,
    PopulationSnapshot,
    kl_target_samples,
    kl_train_classifier,
    mixture_snapshot,
    snapshots,
)
from .ensemble import ParticleEnsemble, TimeGrid, sample_initial
from .errors import ConfigurationError, ParticleMFGError
from .flowmatch import fm_train, integrate
from .neuralnet import MLP, init_mlp
from .particleopt import ObjectiveBreakdown, objective, proximal_solve, residual
from .report import EpochRecord, RunAborted, RunReport

logger = logging.getLogger(__name__)

# 乱数ストリーム (SeedSequence([seed, epoch, stream, ...]))
STREAM_SAMPLE = 0
STREAM_PARTICLES = 1
STREAM_FLOW = 2
STREAM_CLASSIFIER = 3
STREAM_TARGET = 4
STREAM_NETWORK = 5

EpochStart = Callable[[int, int], None]
EpochEnd = Callable[[EpochRecord, int], None]


def stream_seed(seed: int, epoch: int, stream: int, *extra: int) -> np.random.SeedSequence:
    """エポック・用途ごとに独立な乱数シード"""
    return np.random.SeedSequence([seed, epoch, stream, *extra])


def init_velocity(config: SolverConfig) -> MLP:
    """入力 [x; t], 出力 d の速度場 v_θ を初期化"""
    d = config.d
    return init_mlp(
        (d + 1, *config.hidden, d),
        config.activation,
        seed=stream_seed(config.seed, 0, STREAM_NETWORK),
        time_input=True,
        zero_output=config.zero_output,
    )


def _check_runnable(config: SolverConfig) -> None:
    config.validate()
    if config.m < 2:
        raise ConfigurationError(f"grid.m は2以上が必要です: {config.m}")


def _diagnose(ens: ParticleEnsemble, F: CouplingSpec, G: CouplingSpec,
              pop: list[PopulationSnapshot]) -> tuple[ObjectiveBreakdown, float]:
    obj = objective(ens, F, G, pop)
    res = residual(ens, F, G, pop)
    if not (np.isfinite(obj.total) and np.isfinite(res)):
        raise ParticleMFGError(f"診断値が非有限値になりました: total={obj.total}, residual={res}")
    return obj, res


class _TerminalClassifier:
    """KL 終端コスト用の分類器とその学習スケジュール"""

    def __init__(self, spec: KLTerminal):
        self.spec = spec
        self.net: Optional[MLP] = None
        self.target: Optional[np.ndarray] = None
        self.last_loss: Optional[float] = None

    def train(self, terminal: PopulationSnapshot, steps: int, seed: np.random.SeedSequence) -> None:
        cfg = self.spec.classifier
        self.net, losses = kl_train_classifier(
            self.spec, terminal, steps, cfg.batch, cfg.lr, seed, target=self.target, net=self.net
        )
        if losses:
            self.last_loss = losses[-1]

    @property
    def coupling(self) -> LogitTerminal:
        assert self.net is not None
        return LogitTerminal(self.net)


def _optimize_round(
    ens: ParticleEnsemble,
    config: SolverConfig,
    pop: list[PopulationSnapshot],
    G: CouplingSpec,
    seed: np.random.SeedSequence,
    classifier: Optional[_TerminalClassifier] = None,
    clf_seed: Optional[np.random.SeedSequence] = None,
) -> ParticleEnsemble:
    """固定した母集団に対して L1 回の粒子更新 (KL なら every 回ごとに分類器を再学習)"""
    if config.inner_steps == 0:
        return ens
    explicit = config.proximal_alpha is not None
    if classifier is None:
        return proximal_solve(ens, config.interaction, G, pop, config.inner_steps, config.beta,
                              config.n1, seed, alpha=config.proximal_alpha,
                              explicit_proximal=explicit)

    cfg = classifier.spec.classifier
    chunk_seeds = seed.spawn((config.inner_steps + cfg.every - 1) // cfg.every)
    refresh_seeds = clf_seed.spawn(len(chunk_seeds)) if clf_seed is not None else [None] * len(chunk_seeds)
    remaining = config.inner_steps
    for c, chunk_seed in enumerate(chunk_seeds):
        steps = min(cfg.every, remaining)
        ens = proximal_solve(ens, config.interaction, classifier.coupling, pop, steps, config.beta,
                             config.n1, chunk_seed, alpha=config.proximal_alpha,
                             explicit_proximal=explicit)
        remaining -= steps
        if remaining > 0 and cfg.steps > 0:
            terminal = PopulationSnapshot(time_index=config.m, samples=ens.terminal)
            classifier.train(terminal, cfg.steps, refresh_seeds[c])
    return ens


def run(
    config: SolverConfig,
    workers: int = 1,
    on_epoch_start: Optional[EpochStart] = None,
    on_epoch_end: Optional[EpochEnd] = None,
) -> tuple[MLP, RunReport]:
    """
    粒子ベースのフローマッチングで MFG を解く

    各エポック k = 1..K:
      1. 初期分布から n 点を引き, 現在の v_θ で軌道を積分
      2. L 回: 現在の粒子からスナップショットを作り直し, L1 回の粒子更新
      3. k が fm_every の倍数なら L2 ステップのフローマッチング
    診断値は最適化後の粒子と新しいスナップショットで評価する。

    Args:
        config: ソルバー設定
        workers: 積分のスレッド数
        on_epoch_start: エポック開始時のコールバック (k, K)
        on_epoch_end: エポック終了時のコールバック (record, K)

    Returns:
        (学習後の速度場, RunReport)

    Raises:
        RunAborted: エポック途中で数値計算が失敗した (それまでのレポート付き)
    """
    _check_runnable(config)
    grid = TimeGrid(config.m)
    net = init_velocity(config)
    report = RunReport()
    K = config.epochs
    F = config.interaction

    classifier = _TerminalClassifier(config.terminal) \
        if isinstance(config.terminal, KLTerminal) else None
    if classifier is not None:
        classifier.target = kl_target_samples(config.terminal, stream_seed(config.seed, 0, STREAM_TARGET))

    logger.info(f"run: K={K}, L={config.refresh_rounds}, n={config.n}, m={config.m}, d={config.d}")

    for k in range(1, K + 1):
        if on_epoch_start:
            on_epoch_start(k, K)
        started = time.perf_counter()
        try:
            x0 = sample_initial(config.initial, config.n, stream_seed(config.seed, k, STREAM_SAMPLE))
            ens = integrate(net, x0, grid, config.integrator, workers)

            G = config.terminal
            for r in range(config.refresh_rounds):
                pop = snapshots(ens)
                clf_seed = None
                if classifier is not None:
                    clf_seed = stream_seed(config.seed, k, STREAM_CLASSIFIER, r + 1)
                    if r == 0:
                        classifier.train(pop[config.m], config.terminal.classifier.init_steps,
                                         stream_seed(config.seed, k, STREAM_CLASSIFIER))
                    G = classifier.coupling
                ens = _optimize_round(ens, config, pop, G,
                                      stream_seed(config.seed, k, STREAM_PARTICLES, r),
                                      classifier, clf_seed)

            if classifier is not None:
                if classifier.net is None:
                    classifier.train(snapshots(ens)[config.m], config.terminal.classifier.init_steps,
                                     stream_seed(config.seed, k, STREAM_CLASSIFIER))
                G = classifier.coupling

            fm_loss = None
            if k % config.fm_every == 0 and config.fm_steps > 0:
                net, losses = fm_train(net, ens, config.fm_steps, config.n2, config.lr,
                                       stream_seed(config.seed, k, STREAM_FLOW))
                fm_loss = losses[-1]

            obj, res = _diagnose(ens, F, G, snapshots(ens))
        except ConfigurationError:
            raise
        except ParticleMFGError as e:
            logger.error(f"Epoch {k} failed: {e}")
            raise RunAborted(k, e, report) from e

        record = EpochRecord(
            epoch=k,
            objective=obj,
            residual=res,
            fm_loss=fm_loss,
            clf_loss=classifier.last_loss if classifier is not None else None,
            wall_ms=(time.perf_counter() - started) * 1000.0,
        )
        report.append(record)
        report.summarize_terminal(ens)
        if classifier is not None:
            report.classifier = classifier.net
        logger.info(
            f"epoch {k}/{K}: total={obj.total:.6g} residual={res:.6g}"
            + (f" fm_loss={fm_loss:.6g}" if fm_loss is not None else "")
        )
        if on_epoch_end:
            on_epoch_end(record, K)

    return net, report


def harmonic_schedule(round_index: int) -> float:
    """α_ℓ = 1/ℓ"""
    return 1.0 / round_index


def fictitious_play_run(
    config: SolverConfig,
    alpha_schedule: Callable[[int], float] = harmonic_schedule,
    rounds: Optional[int] = None,
    workers: int = 1,
    on_epoch_end: Optional[EpochEnd] = None,
) -> RunReport:
    """
    架空プレイ: ρ^(ℓ+1) = (1-α_ℓ) ρ^(ℓ) + α_ℓ ρ̂^(ℓ)

    ρ^(0) は初期の速度場で積分した粒子。ラウンド ℓ では run のエポック ℓ と同じ
    乱数ストリームで初期点を引き直し, 現在の v_θ で積分した軌道から始めて
    固定した混合母集団への最適応答を L·L1 回の粒子更新で近似する。
    最適応答で v_θ をフローマッチングし, その時刻スライスを混合する。
    ρ に依存しないコストでは run と同じ軌道になる。

    Args:
        config: ソルバー設定 (epochs がラウンド数の既定値)
        alpha_schedule: ラウンド番号 ℓ (1始まり) -> α_ℓ ∈ (0, 1]
        rounds: ラウンド数
        workers: 積分のスレッド数
        on_epoch_end: ラウンド終了時のコールバック (record, rounds)

    Returns:
        RunReport (mixture_masses に各ラウンド後の混合重み)
    """
    _check_runnable(config)
    rounds = config.epochs if rounds is None else rounds
    grid = TimeGrid(config.m)
    net = init_velocity(config)
    report = RunReport()
    F = config.interaction

    classifier = _TerminalClassifier(config.terminal) \
        if isinstance(config.terminal, KLTerminal) else None
    if classifier is not None:
        classifier.target = kl_target_samples(config.terminal, stream_seed(config.seed, 0, STREAM_TARGET))

    population: Optional[list[PopulationSnapshot]] = None

    for ell in range(1, rounds + 1):
        alpha = alpha_schedule(ell)
        if not 0.0 < alpha <= 1.0:
            raise ConfigurationError(f"α_{ell} は (0, 1] が必要です: {alpha}")
        started = time.perf_counter()
        try:
            x0 = sample_initial(config.initial, config.n, stream_seed(config.seed, ell, STREAM_SAMPLE))
            best = integrate(net, x0, grid, config.integrator, workers)
            if population is None:
                population = snapshots(best)

            G = config.terminal
            if classifier is not None:
                # 分類器はラウンド開始時の混合母集団に対して1回だけ学習する
                classifier.train(population[config.m], config.terminal.classifier.init_steps,
                                 stream_seed(config.seed, ell, STREAM_CLASSIFIER))
                G = classifier.coupling
            for r in range(config.refresh_rounds):
                best = _optimize_round(best, config, population, G,
                                       stream_seed(config.seed, ell, STREAM_PARTICLES, r))

            fm_loss = None
            if ell % config.fm_every == 0 and config.fm_steps > 0:
                net, losses = fm_train(net, best, config.fm_steps, config.n2, config.lr,
                                       stream_seed(config.seed, ell, STREAM_FLOW))
                fm_loss = losses[-1]

            population = [mixture_snapshot(old, new, alpha)
                          for old, new in zip(population, snapshots(best))]
            obj, res = _diagnose(best, F, G, population)
        except ConfigurationError:
            raise
        except ParticleMFGError as e:
            logger.error(f"Round {ell} failed: {e}")
            raise RunAborted(ell, e, report) from e

        record = EpochRecord(
            epoch=ell,
            objective=obj,
            residual=res,
            fm_loss=fm_loss,
            clf_loss=classifier.last_loss if classifier is not None else None,
            wall_ms=(time.perf_counter() - started) * 1000.0,
        )
        report.append(record)
        report.mixture_masses.append(population[config.m].masses)
        report.summarize_terminal(best)
        if classifier is not None:
            report.classifier = classifier.net
        logger.info(f"round {ell}/{rounds}: alpha={alpha:.4g} total={obj.total:.6g} residual={res:.6g}")
        if on_epoch_end:
            on_epoch_end(record, rounds)

    return report


# ========== 解析解・参照解 ==========

def _oc_profile(lam: float, g: float, t: np.ndarray) -> np.ndarray:
    """x0 = 1 のときの X(t)"""
    if lam < 0.0 or g < 0.0:
        raise ConfigurationError(f"lambda, g は0以上が必要です: lambda={lam}, g={g}")
    if lam == 0.0:
        return 1.0 - g * t / (1.0 + g)
    s = np.sqrt(lam)
    kappa = (s * np.sinh(s) + g * np.cosh(s)) / (s * np.cosh(s) + g * np.sinh(s))
    return np.cosh(s * t) - kappa * np.sinh(s * t)


def _as_starts(x0: np.ndarray | float) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 0:
        return x0.reshape(1, 1)
    return x0[None, :] if x0.ndim == 1 else x0


def quadratic_oc_oracle(lam: float, g: float, x0: np.ndarray | float, grid: TimeGrid) -> ParticleEnsemble:
    """
    F = (λ/2)|x|^2, G = (g/2)|x|^2 の最適軌道 (ρ に依存しない最適制御)

    Ẍ = λX, X(0) = x0, Ẋ(1) = -g X(1) の解
    X(t) = x0 (cosh(√λ t) - κ sinh(√λ t)),
    κ = (√λ sinh√λ + g cosh√λ) / (√λ cosh√λ + g sinh√λ)。
    λ = 0 では X(t) = x0 (1 - g t / (1 + g))。

    Args:
        lam: λ >= 0
        g: g >= 0
        x0: 初期点 (スカラー, shape (d,) または (n, d))
        grid: 時間グリッド

    Returns:
        ParticleEnsemble (初期点ごとに1本)
    """
    starts = _as_starts(x0)
    profile = _oc_profile(lam, g, grid.nodes)
    return ParticleEnsemble(grid=grid, states=starts[:, None, :] * profile[None, :, None])


def solve_discrete_oc(
    lam: float,
    g: float,
    x0: np.ndarray | float,
    grid: TimeGrid,
    terminal: str = "backward",
) -> ParticleEnsemble:
    """
    2次最適制御の離散オイラー・ラグランジュ方程式を帯行列で直接解く

    内部ノード: -(D_tt X)_j + λ X_j = 0
    終端 "backward": (X_m - X_{m-1})/dt + g X_m = 0 (粒子更新の不動点と同じ)
    終端 "central":  仮想ノード X_{m+1} で (X_{m+1} - X_{m-1})/(2dt) = -g X_m とした2次精度の条件

    Args:
        lam: λ >= 0
        g: g >= 0
        x0: 初期点
        grid: 時間グリッド
        terminal: 終端条件の離散化

    Returns:
        ParticleEnsemble
    """
    if lam < 0.0 or g < 0.0:
        raise ConfigurationError(f"lambda, g は0以上が必要です: lambda={lam}, g={g}")
    m, dt = grid.m, grid.dt
    ab = np.zeros((3, m))
    ab[0, 1:] = -1.0
    ab[1, :] = 2.0 + lam * dt * dt
    ab[2, :-1] = -1.0
    if terminal == "backward":
        ab[1, -1] = 1.0 + g * dt
    elif terminal == "central":
        ab[1, -1] = 1.0 + g * dt + 0.5 * lam * dt * dt
    else:
        raise ConfigurationError(f"未対応の終端条件です: {terminal} (backward, central)")
    rhs = np.zeros(m)
    rhs[0] = 1.0  # X_0 = 1 の寄与

    profile = np.concatenate([[1.0], solve_banded((1, 1), ab, rhs)])
    starts = _as_starts(x0)
    return ParticleEnsemble(grid=grid, states=starts[:, None, :] * profile[None, :, None])


def w2_1d(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    """
    1次元経験分布間の Wasserstein-2 距離 (順序統計量の RMS 差)

    Args:
        samples_a: サンプル
        samples_b: 同数のサンプル

    Returns:
        距離
    """
    a = np.sort(np.asarray(samples_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(samples_b, dtype=np.float64).ravel())
    if a.size != b.size:
        raise ConfigurationError(f"サンプル数が一致しません: {a.size} != {b.size}")
    if a.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((a - b) ** 2)))
