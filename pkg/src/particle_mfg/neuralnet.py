#!/usr/bin/env python3
"""
全結合ネットワーク (MLP)
- 順伝播と逆伝播 (パラメータ勾配と入力勾配の両方)
- Adam オプティマイザ
- パラメータのバイナリ保存・読み込み

速度場 v_θ(x, t) と KL 項の分類器で共有する。
"""

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .artifacts import atomic_write_bytes
from .errors import ConfigurationError, TrainingError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "swish")

# バイナリ形式: magic, 層幅の数, 層幅, 活性化タグ, 時刻入力フラグ, float64 LE パラメータ
MAGIC = b"PMFGMLP\x01"


@dataclass
class MLP:
    """全結合ネットワーク (出力層は恒等写像)"""
    widths: tuple[int, ...]       # 入力幅, 隠れ層幅..., 出力幅
    activation: str               # 隠れ層の活性化 ("relu" or "swish")
    weights: list[np.ndarray]     # 各層 shape (w_out, w_in)
    biases: list[np.ndarray]      # 各層 shape (w_out,)
    time_input: bool = False      # 入力が [x; t] (幅 d+1) かどうか

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"未対応の活性化関数です: {self.activation}")
        if len(self.widths) < 2:
            raise ConfigurationError(f"層幅は2つ以上必要です: {self.widths}")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.widths[k + 1], self.widths[k])
            if W.shape != expected or b.shape != (self.widths[k + 1],):
                raise ConfigurationError(f"層 {k} の形状が層幅 {self.widths} と一致しません")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        return sum((w_in + 1) * w_out for w_in, w_out in zip(self.widths[:-1], self.widths[1:]))

    def copy(self) -> "MLP":
        return replace(
            self,
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def get_flat(self) -> np.ndarray:
        """パラメータを層順 (重み行優先, バイアス) の1次元配列に"""
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b)
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_flat(self, flat: np.ndarray) -> "MLP":
        """1次元配列からパラメータを復元した新しいネットワークを返す"""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ConfigurationError(f"パラメータ数が一致しません: {flat.shape} != ({self.n_params},)")
        weights, biases, pos = [], [], 0
        for w_in, w_out in zip(self.widths[:-1], self.widths[1:]):
            weights.append(flat[pos:pos + w_in * w_out].reshape(w_out, w_in).copy())
            pos += w_in * w_out
            biases.append(flat[pos:pos + w_out].copy())
            pos += w_out
        return replace(self, weights=weights, biases=biases)


@dataclass
class Gradients:
    """MLP と同じ形のパラメータ勾配"""
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b)
        return np.concatenate(parts) if parts else np.zeros(0)


def init_mlp(
    widths: tuple[int, ...] | list[int],
    activation: str = "relu",
    seed: Optional[int | np.random.SeedSequence] = None,
    time_input: bool = False,
    zero_output: bool = False,
) -> MLP:
    """
    MLP を初期化

    重みは U[-sqrt(6/(w_in+w_out)), +sqrt(6/(w_in+w_out))], バイアスは0。

    Args:
        widths: 入力幅, 隠れ層幅..., 出力幅
        activation: 隠れ層の活性化関数
        seed: 乱数シード
        time_input: 入力が [x; t] かどうか
        zero_output: 出力層の重みを0にする (初期状態で出力が恒等的に0)

    Returns:
        初期化済みの MLP
    """
    widths = tuple(int(w) for w in widths)
    if any(w < 1 for w in widths):
        raise ConfigurationError(f"層幅は正の整数が必要です: {widths}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (w_in + w_out))
        weights.append(rng.uniform(-limit, limit, size=(w_out, w_in)))
        biases.append(np.zeros(w_out))
    if zero_output:
        weights[-1][:] = 0.0
    return MLP(widths=widths, activation=activation, weights=weights, biases=biases,
               time_input=time_input)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z * expit(z)


def _activate_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    s = expit(z)
    return s + z * s * (1.0 - s)


def _as_batch(net: MLP, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.widths[0]:
        raise ConfigurationError(f"入力幅 {x.shape} がネットワークの入力幅 {net.widths[0]} と一致しません")
    return xb, single


def forward(net: MLP, x: np.ndarray) -> np.ndarray:
    """
    順伝播

    Args:
        net: ネットワーク
        x: 入力 shape (w_0,) または (B, w_0)

    Returns:
        出力 shape (w_L,) または (B, w_L)
    """
    h, single = _as_batch(net, x)
    last = net.n_layers - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W.T + b
        h = z if k == last else _activate(z, net.activation)
    return h[0] if single else h


def backward(net: MLP, x: np.ndarray, upstream: np.ndarray) -> tuple[Gradients, np.ndarray]:
    """
    逆伝播

    スカラー損失 ℓ について upstream = ∂ℓ/∂output を受け取り,
    パラメータ勾配 (バッチ方向に和) と入力勾配 ∂ℓ/∂x を返す。

    Args:
        net: ネットワーク
        x: 入力 shape (w_0,) または (B, w_0)
        upstream: 出力の余接ベクトル (出力と同じ形)

    Returns:
        (パラメータ勾配, 入力勾配)
    """
    h, single = _as_batch(net, x)
    g = np.asarray(upstream, dtype=np.float64)
    g = g[None, :] if single else g
    if g.shape != (h.shape[0], net.widths[-1]):
        raise ConfigurationError(f"upstream の形状 {g.shape} が出力と一致しません")

    # 順伝播で各層の入力と前活性化を記録
    inputs, pre = [], []
    last = net.n_layers - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ W.T + b
        pre.append(z)
        h = z if k == last else _activate(z, net.activation)

    grad_w: list[np.ndarray] = [np.empty(0)] * net.n_layers
    grad_b: list[np.ndarray] = [np.empty(0)] * net.n_layers
    for k in range(last, -1, -1):
        if k != last:
            g = g * _activate_grad(pre[k], net.activation)
        grad_w[k] = g.T @ inputs[k]
        grad_b[k] = g.sum(axis=0)
        g = g @ net.weights[k]

    return Gradients(weights=grad_w, biases=grad_b), (g[0] if single else g)


# ========== Adam ==========

@dataclass
class AdamState:
    """Adam のモーメントとステップ数"""
    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0.0:
            raise ConfigurationError(f"学習率は0以上が必要です: {self.lr}")


def init_adam(n_params: int, lr: float) -> AdamState:
    """パラメータ数 n_params 用の Adam 状態 (モーメント0)"""
    return AdamState(lr=lr, m=np.zeros(n_params), v=np.zeros(n_params))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """
    バイアス補正付き Adam の1ステップ

    Args:
        state: Adam 状態
        params: 1次元パラメータ
        grads: params と同じ形の勾配

    Returns:
        (更新後のパラメータ, 更新後の状態)
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ConfigurationError(f"形状が一致しません: params={params.shape}, grads={grads.shape}")
    step = state.step + 1
    if not np.all(np.isfinite(grads)):
        raise TrainingError("勾配に非有限値が含まれています", step=step)

    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)

    return new_params, replace(state, m=m, v=v, step=step)


# ========== 保存・読み込み ==========

def mlp_to_bytes(net: MLP) -> bytes:
    """バイナリ形式にシリアライズ"""
    header = MAGIC
    header += struct.pack("<I", len(net.widths))
    header += struct.pack(f"<{len(net.widths)}I", *net.widths)
    header += struct.pack("<BB", ACTIVATIONS.index(net.activation), int(net.time_input))
    return header + net.get_flat().astype("<f8").tobytes()


def mlp_from_bytes(data: bytes) -> MLP:
    """mlp_to_bytes の逆変換"""
    if not data.startswith(MAGIC):
        raise ConfigurationError("ネットワークファイルの magic が一致しません")
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    widths = struct.unpack_from(f"<{count}I", data, pos)
    pos += 4 * count
    act_tag, time_flag = struct.unpack_from("<BB", data, pos)
    pos += 2
    if act_tag >= len(ACTIVATIONS):
        raise ConfigurationError(f"未知の活性化タグです: {act_tag}")
    flat = np.frombuffer(data, dtype="<f8", offset=pos).astype(np.float64)
    template = init_mlp(widths, ACTIVATIONS[act_tag], seed=0, time_input=bool(time_flag))
    return template.set_flat(flat)


def save_mlp(net: MLP, path: str | Path) -> Path:
    """ネットワークをファイルにアトミックに保存"""
    return atomic_write_bytes(path, mlp_to_bytes(net))


def load_mlp(path: str | Path) -> MLP:
    """save_mlp で保存したネットワークを読み込む"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"ファイルが見つかりません: {path}")
    net = mlp_from_bytes(path.read_bytes())
    logger.debug(f"Loaded network widths={net.widths} from {path}")
    return net
