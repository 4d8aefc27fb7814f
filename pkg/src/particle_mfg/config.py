#!/usr/bin/env python3
"""
ソルバー設定
- SolverConfig (全ハイパーパラメータ)
- 実験プリセット
- フラットな key=value 形式 (ドット区切りのセクション) の読み込みと書き出し
- .env による CLI 既定値の読み込み
"""

import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, TypeVar

from dotenv import load_dotenv
from dotenv.parser import parse_stream

from .couplings import (
    ClassifierConfig,
    CouplingSpec,
    KernelInteraction,
    KLTerminal,
    LogitTerminal,
    QuadraticPotential,
    QuadraticTerminal,
    ZeroCoupling,
)
from .ensemble import Checkerboard, EmpiricalFile, Gaussian, InitialDistribution
from .errors import ConfigurationError
from .flowmatch import IntegratorScheme

logger = logging.getLogger(__name__)

T = TypeVar("T")

# グローバル設定ディレクトリ
CONFIG_DIR = Path.home() / ".config" / "particle-mfg"


@dataclass(frozen=True)
class SolverConfig:
    """粒子ベースのフローマッチング MFG ソルバーの全ハイパーパラメータ"""
    # 外側ループ
    epochs: int = 1                  # K
    refresh_rounds: int = 1          # L (コスト再計算の回数)
    seed: int = 0
    fm_every: int = 1                # 何エポックごとにフローマッチングするか
    # 時間グリッド
    m: int = 20
    integrator: str = "euler"
    # 粒子更新
    n: int = 1000
    inner_steps: int = 100           # L1
    inner_batch: Optional[int] = None  # n1 (None は n)
    beta: float = 0.01
    # 速度場
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    fm_steps: int = 100              # L2
    fm_batch: Optional[int] = None   # n2 (None は n)
    lr: float = 0.01
    zero_output: bool = False
    # 問題設定
    initial: InitialDistribution = field(default_factory=lambda: Gaussian((0.0,), (1.0,)))
    interaction: CouplingSpec = field(default_factory=ZeroCoupling)
    terminal: CouplingSpec = field(default_factory=ZeroCoupling)
    # 明示的な近接項 (None なら使わない)
    proximal_alpha: Optional[float] = None

    @property
    def d(self) -> int:
        return self.initial.dim

    @property
    def n1(self) -> int:
        return self.n if self.inner_batch is None else min(self.inner_batch, self.n)

    @property
    def n2(self) -> int:
        return self.n if self.fm_batch is None else min(self.fm_batch, self.n)

    def validate(self) -> None:
        """不変条件の検証 (違反は ConfigurationError)"""
        counts = {
            "solver.epochs": self.epochs,
            "solver.refresh_rounds": self.refresh_rounds,
            "particles.steps": self.inner_steps,
            "velocity.steps": self.fm_steps,
        }
        for key, value in counts.items():
            if value < 0:
                raise ConfigurationError(f"{key} は0以上が必要です: {value}")
        for key, value in {"grid.m": self.m, "particles.n": self.n,
                           "solver.fm_every": self.fm_every}.items():
            if value < 1:
                raise ConfigurationError(f"{key} は1以上が必要です: {value}")
        if self.m < 2 and self.inner_steps > 0:
            raise ConfigurationError(f"粒子更新には grid.m >= 2 が必要です: {self.m}")
        for key, batch in {"particles.batch": self.inner_batch, "velocity.batch": self.fm_batch}.items():
            if batch is not None and batch < 1:
                raise ConfigurationError(f"{key} は1以上が必要です: {batch}")
        if not self.beta > 0.0:
            raise ConfigurationError(f"particles.beta は正の値が必要です: {self.beta}")
        if not self.lr > 0.0:
            raise ConfigurationError(f"velocity.lr は正の値が必要です: {self.lr}")
        if any(w < 1 for w in self.hidden):
            raise ConfigurationError(f"velocity.hidden は正の整数が必要です: {self.hidden}")
        if self.activation not in ("relu", "swish"):
            raise ConfigurationError(f"未対応の活性化関数です: {self.activation}")
        if self.integrator not in {s.value for s in IntegratorScheme}:
            raise ConfigurationError(f"未対応の積分法です: {self.integrator}")
        if self.proximal_alpha is not None and not self.proximal_alpha > 0.0:
            raise ConfigurationError(f"proximal.alpha は正の値が必要です: {self.proximal_alpha}")
        if isinstance(self.interaction, (KLTerminal, LogitTerminal)):
            raise ConfigurationError("KL コストは終端コストとしてのみ使えます")

        self.initial.validate()
        self.interaction.validate(self.d)
        self.terminal.validate(self.d)


# ========== プリセット ==========

PRESETS: dict[str, SolverConfig] = {
    # 非対称カーネルによる非ポテンシャル型 MFG
    "non_potential_kernel": SolverConfig(
        epochs=100, refresh_rounds=3, seed=0, fm_every=1,
        m=20, integrator="euler",
        n=2000, inner_steps=100, inner_batch=None, beta=0.01,
        hidden=(4, 8, 16), activation="relu", fm_steps=100, fm_batch=500, lr=0.01,
        initial=Gaussian((0.0, 1.0), (0.02, 0.1)),
        interaction=KernelInteraction(10.0, (0.0, 1.0)),
        terminal=QuadraticTerminal(1.0, -1.0, 1),
    ),
    # チェッカーボード → 標準ガウス (KL 終端コスト)
    "checkerboard_to_gaussian": SolverConfig(
        epochs=20, refresh_rounds=1, seed=0, fm_every=1,
        m=10, integrator="rk4",
        n=4096, inner_steps=1000, inner_batch=2048, beta=0.001,
        hidden=(64, 64, 64), activation="relu", fm_steps=1000, fm_batch=2048, lr=0.001,
        initial=Checkerboard(4, 4.0),
        interaction=ZeroCoupling(),
        terminal=KLTerminal(
            target=Gaussian((0.0, 0.0), (1.0, 1.0)),
            n_target=4096,
            classifier=ClassifierConfig(hidden=(64, 64, 64), activation="relu", init_steps=1000,
                                        every=10, steps=20, lr=0.001, batch=2048),
        ),
    ),
    # 1次元 2次最適制御 (解析解あり)
    "quadratic_oc": SolverConfig(
        epochs=3, refresh_rounds=1, seed=0, fm_every=1,
        m=20, integrator="euler",
        n=64, inner_steps=2000, inner_batch=None, beta=0.02,
        hidden=(16, 16), activation="relu", fm_steps=200, fm_batch=None, lr=0.01,
        zero_output=True,
        initial=Gaussian((1.0,), (0.01,)),
        interaction=QuadraticPotential(1.0),
        terminal=QuadraticPotential(1.0),
    ),
}


def get_preset(name: str) -> SolverConfig:
    """名前からプリセットを取得"""
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"未知のプリセットです: {name} (利用可能: {', '.join(sorted(PRESETS))})"
        ) from None


# ========== 書き出し ==========

def format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def _distribution_items(prefix: str, dist: InitialDistribution) -> list[tuple[str, object]]:
    if isinstance(dist, Gaussian):
        return [(f"{prefix}.kind", "gaussian"), (f"{prefix}.mean", dist.mean),
                (f"{prefix}.cov_diag", dist.cov_diag)]
    if isinstance(dist, Checkerboard):
        return [(f"{prefix}.kind", "checkerboard"), (f"{prefix}.cells", dist.cells),
                (f"{prefix}.extent", float(dist.extent))]
    if isinstance(dist, EmpiricalFile):
        return [(f"{prefix}.kind", "empirical"), (f"{prefix}.path", dist.path)]
    raise ConfigurationError(f"書き出せない分布です: {type(dist).__name__}")


def _coupling_items(prefix: str, spec: CouplingSpec) -> list[tuple[str, object]]:
    if isinstance(spec, ZeroCoupling):
        return [(f"{prefix}.kind", "zero")]
    if isinstance(spec, KernelInteraction):
        return [(f"{prefix}.kind", "kernel"), (f"{prefix}.lambda", float(spec.lambda_F)),
                (f"{prefix}.a", tuple(float(v) for v in spec.a))]
    if isinstance(spec, QuadraticTerminal):
        return [(f"{prefix}.kind", "quadratic"), (f"{prefix}.lambda", float(spec.lambda_G)),
                (f"{prefix}.c", float(spec.c)), (f"{prefix}.index", spec.index)]
    if isinstance(spec, QuadraticPotential):
        items: list[tuple[str, object]] = [(f"{prefix}.kind", "potential"),
                                           (f"{prefix}.lambda", float(spec.lam))]
        if spec.center:
            items.append((f"{prefix}.center", tuple(float(v) for v in spec.center)))
        return items
    if isinstance(spec, KLTerminal):
        cfg = spec.classifier
        items = [(f"{prefix}.kind", "kl")]
        items += _distribution_items("target", spec.target)
        if not isinstance(spec.target, EmpiricalFile):
            items.append(("target.n", spec.n_target))
        items += [
            ("classifier.hidden", cfg.hidden),
            ("classifier.activation", cfg.activation),
            ("classifier.init_steps", cfg.init_steps),
            ("classifier.every", cfg.every),
            ("classifier.steps", cfg.steps),
            ("classifier.lr", float(cfg.lr)),
            ("classifier.batch", cfg.batch),
        ]
        return items
    raise ConfigurationError(f"書き出せない結合です: {type(spec).__name__}")


def config_items(config: SolverConfig) -> list[tuple[str, object]]:
    """正準順の (key, value) 一覧"""
    items: list[tuple[str, object]] = [
        ("solver.epochs", config.epochs),
        ("solver.refresh_rounds", config.refresh_rounds),
        ("solver.seed", config.seed),
        ("solver.fm_every", config.fm_every),
        ("grid.m", config.m),
        ("grid.integrator", config.integrator),
        ("particles.n", config.n),
        ("particles.steps", config.inner_steps),
    ]
    if config.inner_batch is not None:
        items.append(("particles.batch", config.inner_batch))
    items += [
        ("particles.beta", float(config.beta)),
        ("velocity.hidden", config.hidden),
        ("velocity.activation", config.activation),
        ("velocity.steps", config.fm_steps),
    ]
    if config.fm_batch is not None:
        items.append(("velocity.batch", config.fm_batch))
    items += [
        ("velocity.lr", float(config.lr)),
        ("velocity.zero_output", config.zero_output),
    ]
    items += _distribution_items("initial", config.initial)
    items += _coupling_items("interaction", config.interaction)
    items += _coupling_items("terminal", config.terminal)
    if config.proximal_alpha is not None:
        items.append(("proximal.alpha", float(config.proximal_alpha)))
    return items


def echo_config(config: SolverConfig) -> str:
    """
    設定を正準なテキストに書き出す

    parse_config(echo_config(c)) == c が成り立つ。
    """
    lines = ["# particle-mfg solver config"]
    lines += [f"{key}={format_value(value)}" for key, value in config_items(config)]
    return "\n".join(lines) + "\n"


# ========== 読み込み ==========

KNOWN_KEYS = frozenset({
    "solver.epochs", "solver.refresh_rounds", "solver.seed", "solver.fm_every",
    "grid.m", "grid.integrator",
    "particles.n", "particles.steps", "particles.batch", "particles.beta",
    "velocity.hidden", "velocity.activation", "velocity.steps", "velocity.batch",
    "velocity.lr", "velocity.zero_output",
    "initial.kind", "initial.mean", "initial.cov_diag", "initial.cells", "initial.extent",
    "initial.path",
    "interaction.kind", "interaction.lambda", "interaction.a", "interaction.center",
    "terminal.kind", "terminal.lambda", "terminal.c", "terminal.index", "terminal.center",
    "target.kind", "target.mean", "target.cov_diag", "target.cells", "target.extent",
    "target.path", "target.n",
    "classifier.hidden", "classifier.activation", "classifier.init_steps", "classifier.every",
    "classifier.steps", "classifier.lr", "classifier.batch",
    "proximal.alpha",
})


@dataclass(frozen=True)
class Setting:
    """設定値とその出所"""
    value: str
    path: Optional[str] = None
    line: Optional[int] = None


def read_settings(text: str, path: Optional[str] = None) -> dict[str, Setting]:
    """
    key=value テキストを読み込む (行番号付き)

    Args:
        text: 設定テキスト
        path: エラーメッセージ用のファイル名

    Returns:
        key -> Setting
    """
    settings: dict[str, Setting] = {}
    for binding in parse_stream(io.StringIO(text)):
        raw = binding.original.string
        # 直前の空行はこのバインディングに含まれる
        line = binding.original.line + raw[: len(raw) - len(raw.lstrip())].count("\n")
        if binding.error:
            raise ConfigurationError(
                f"解釈できない行です: {binding.original.string.strip()!r}", path, line
            )
        if binding.key is None:
            continue
        if binding.key not in KNOWN_KEYS:
            raise ConfigurationError(f"未知のキーです: {binding.key}", path, line)
        if binding.value is None or binding.value.strip() == "":
            raise ConfigurationError(f"値がありません: {binding.key}", path, line)
        settings[binding.key] = Setting(binding.value.strip(), path, line)
    return settings


def parse_override(text: str) -> dict[str, Setting]:
    """--set key=value を1件読み込む"""
    if "=" not in text:
        raise ConfigurationError(f"--set は key=value 形式が必要です: {text}", "--set")
    key, value = text.split("=", 1)
    return read_settings(f"{key.strip()}={value.strip()}\n", path=f"--set {key.strip()}")


class _SettingsReader:
    """Setting を型変換し, 失敗したら出所付きの ConfigurationError にする"""

    def __init__(self, settings: dict[str, Setting]):
        self.settings = settings

    def fail(self, key: str, message: str) -> ConfigurationError:
        s = self.settings.get(key)
        return ConfigurationError(message, s.path if s else None, s.line if s else None)

    def get(self, key: str, convert: Callable[[str], T], default: T) -> T:
        s = self.settings.get(key)
        if s is None:
            return default
        try:
            return convert(s.value)
        except (ValueError, TypeError) as e:
            raise ConfigurationError(f"{key} の値 {s.value!r} が不正です: {e}", s.path, s.line) from e

    def require(self, key: str, convert: Callable[[str], T]) -> T:
        if key not in self.settings:
            raise ConfigurationError(f"{key} が指定されていません")
        return self.get(key, convert, None)  # type: ignore[arg-type]


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError("true/false が必要です")


def _optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("all", "none") else int(text)


_MISSING = object()


def _fallback(default: object, kind: str, attr: str) -> object:
    """同じ種類の既定値があればその属性, なければ必須"""
    return getattr(default, attr) if default is not None and _kind_of(default) == kind else _MISSING


def _param(r: _SettingsReader, key: str, convert: Callable[[str], T], fallback: object) -> T:
    if fallback is _MISSING:
        return r.require(key, convert)
    return r.get(key, convert, fallback)  # type: ignore[arg-type]


def _kind_of(obj: object) -> str:
    if isinstance(obj, (Gaussian, Checkerboard, EmpiricalFile)):
        return str(_distribution_items("_", obj)[0][1])
    return str(_coupling_items("_", obj)[0][1])  # type: ignore[arg-type]


def _read_distribution(r: _SettingsReader, prefix: str, default: Optional[InitialDistribution]
                       ) -> InitialDistribution:
    kind_key = f"{prefix}.kind"
    kind = r.get(kind_key, str, _kind_of(default) if default is not None else "")
    if not kind:
        raise ConfigurationError(f"{kind_key} が指定されていません")
    if kind == "gaussian":
        return Gaussian(
            _param(r, f"{prefix}.mean", _floats, _fallback(default, kind, "mean")),
            _param(r, f"{prefix}.cov_diag", _floats, _fallback(default, kind, "cov_diag")),
        )
    if kind == "checkerboard":
        cells = _fallback(default, kind, "cells")
        extent = _fallback(default, kind, "extent")
        return Checkerboard(
            r.get(f"{prefix}.cells", int, 4 if cells is _MISSING else cells),  # type: ignore[arg-type]
            r.get(f"{prefix}.extent", float, 4.0 if extent is _MISSING else extent),  # type: ignore[arg-type]
        )
    if kind == "empirical":
        return EmpiricalFile(_param(r, f"{prefix}.path", str, _fallback(default, kind, "path")))
    raise r.fail(kind_key, f"未知の分布です: {kind} (gaussian, checkerboard, empirical)")


def _read_coupling(r: _SettingsReader, prefix: str, default: CouplingSpec) -> CouplingSpec:
    kind_key = f"{prefix}.kind"
    kind = r.get(kind_key, str, _kind_of(default))
    same = default if _kind_of(default) == kind else None
    if kind == "zero":
        return ZeroCoupling()
    if kind == "kernel":
        return KernelInteraction(
            _param(r, f"{prefix}.lambda", float, _fallback(same, kind, "lambda_F")),
            _param(r, f"{prefix}.a", _floats, _fallback(same, kind, "a")),
        )
    if kind == "quadratic":
        index = _fallback(same, kind, "index")
        return QuadraticTerminal(
            _param(r, f"{prefix}.lambda", float, _fallback(same, kind, "lambda_G")),
            _param(r, f"{prefix}.c", float, _fallback(same, kind, "c")),
            r.get(f"{prefix}.index", int, 1 if index is _MISSING else index),  # type: ignore[arg-type]
        )
    if kind == "potential":
        center = _fallback(same, kind, "center")
        return QuadraticPotential(
            _param(r, f"{prefix}.lambda", float, _fallback(same, kind, "lam")),
            r.get(f"{prefix}.center", _floats, () if center is _MISSING else center),  # type: ignore[arg-type]
        )
    if kind == "kl":
        base = same if isinstance(same, KLTerminal) else None
        target = _read_distribution(r, "target", base.target if base else None)
        c0 = base.classifier if base else ClassifierConfig()
        classifier = ClassifierConfig(
            hidden=r.get("classifier.hidden", _ints, c0.hidden),
            activation=r.get("classifier.activation", str, c0.activation),
            init_steps=r.get("classifier.init_steps", int, c0.init_steps),
            every=r.get("classifier.every", int, c0.every),
            steps=r.get("classifier.steps", int, c0.steps),
            lr=r.get("classifier.lr", float, c0.lr),
            batch=r.get("classifier.batch", int, c0.batch),
        )
        return KLTerminal(target, r.get("target.n", int, base.n_target if base else 4096), classifier)
    raise r.fail(kind_key, f"未知の結合です: {kind} (zero, kernel, quadratic, potential, kl)")


def build_config(settings: dict[str, Setting], base: Optional[SolverConfig] = None) -> SolverConfig:
    """
    Setting を base に重ねて SolverConfig を作り, 検証する

    Args:
        settings: key -> Setting
        base: 上書き元 (省略時は既定値)

    Returns:
        検証済みの SolverConfig
    """
    base = base or SolverConfig()
    r = _SettingsReader(settings)
    config = SolverConfig(
        epochs=r.get("solver.epochs", int, base.epochs),
        refresh_rounds=r.get("solver.refresh_rounds", int, base.refresh_rounds),
        seed=r.get("solver.seed", int, base.seed),
        fm_every=r.get("solver.fm_every", int, base.fm_every),
        m=r.get("grid.m", int, base.m),
        integrator=r.get("grid.integrator", str, base.integrator),
        n=r.get("particles.n", int, base.n),
        inner_steps=r.get("particles.steps", int, base.inner_steps),
        inner_batch=r.get("particles.batch", _optional_int, base.inner_batch),
        beta=r.get("particles.beta", float, base.beta),
        hidden=r.get("velocity.hidden", _ints, base.hidden),
        activation=r.get("velocity.activation", str, base.activation),
        fm_steps=r.get("velocity.steps", int, base.fm_steps),
        fm_batch=r.get("velocity.batch", _optional_int, base.fm_batch),
        lr=r.get("velocity.lr", float, base.lr),
        zero_output=r.get("velocity.zero_output", _bool, base.zero_output),
        initial=_read_distribution(r, "initial", base.initial),
        interaction=_read_coupling(r, "interaction", base.interaction),
        terminal=_read_coupling(r, "terminal", base.terminal),
        proximal_alpha=r.get("proximal.alpha", float, base.proximal_alpha),
    )
    try:
        config.validate()
    except ConfigurationError as e:
        # 違反したキーの行番号を付ける
        key = e.message.split(" ", 1)[0]
        if e.path is None and key in settings:
            raise r.fail(key, e.message) from None
        raise
    return config


def parse_config(
    path: Optional[str | Path] = None,
    preset: Optional[str] = None,
    overrides: Iterable[str] = (),
    text: Optional[str] = None,
) -> SolverConfig:
    """
    設定ファイル・プリセット・上書きから SolverConfig を作る

    優先順位: overrides > 設定ファイル (または text) > プリセット > 既定値

    Args:
        path: 設定ファイルのパス
        preset: プリセット名
        overrides: "key=value" の列
        text: 設定テキスト (path の代わり)

    Returns:
        検証済みの SolverConfig
    """
    base = get_preset(preset) if preset else SolverConfig()
    settings: dict[str, Setting] = {}

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"設定ファイルが見つかりません: {path}")
        settings.update(read_settings(path.read_text(encoding="utf-8"), str(path)))
    elif text is not None:
        settings.update(read_settings(text, "<config>"))

    for item in overrides:
        settings.update(parse_override(item))

    config = build_config(settings, base)
    logger.debug(f"Parsed config: preset={preset}, path={path}, overrides={list(overrides)}")
    return config


# ========== 環境変数 ==========

def load_env_files(env_file: Optional[str] = None) -> None:
    """
    優先順位に従って.envファイルを読み込み (既存の環境変数は上書きしない)

    優先順位:
    1. 明示的に指定されたファイル（最優先）
    2. カレントディレクトリの .env
    3. グローバル設定ディレクトリ ~/.config/particle-mfg/.env
    """
    if env_file:
        env_path = Path(env_file)
        if not env_path.exists():
            raise ConfigurationError(f"指定された環境変数ファイルが見つかりません: {env_file}")
        logger.debug(f"Loading environment from explicit file: {env_file}")
        load_dotenv(env_path, override=False)
        return

    local_env = Path(".env")
    if local_env.exists():
        logger.debug(f"Loading environment from project .env: {local_env.absolute()}")
        load_dotenv(local_env, override=False)
        return

    global_env = CONFIG_DIR / ".env"
    if global_env.exists():
        logger.debug(f"Loading environment from global config: {global_env}")
        load_dotenv(global_env, override=False)
        return

    logger.debug("No .env file found, using environment variables only")


def env_defaults(env_file: Optional[str] = None) -> dict[str, Optional[str]]:
    """
    CLI の既定値を環境変数から取得

    Returns:
        {"out_dir": PARTICLE_MFG_OUT_DIR, "threads": PARTICLE_MFG_THREADS}
    """
    load_env_files(env_file)
    return {
        "out_dir": os.getenv("PARTICLE_MFG_OUT_DIR"),
        "threads": os.getenv("PARTICLE_MFG_THREADS"),
    }
