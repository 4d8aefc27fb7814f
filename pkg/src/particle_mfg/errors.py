#!/usr/bin/env python3
"""
例外クラス
- 設定エラー (CLIでは終了コード2)
- 数値計算の失敗 (学習の発散・積分の非有限値・粒子更新の非有限値)
"""

from typing import Optional


class ParticleMFGError(Exception):
    """particle-mfg の基底例外"""


class ConfigurationError(ParticleMFGError, ValueError):
    """設定値が不正"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        """
        Args:
            message: エラー内容
            path: 設定ファイルのパス (分かる場合)
            line: 設定ファイルの行番号 (1始まり)
        """
        self.message = message
        self.path = path
        self.line = line
        super().__init__(self._format())

    def _format(self) -> str:
        if self.path and self.line:
            return f"{self.path}:{self.line}: {self.message}"
        if self.path:
            return f"{self.path}: {self.message}"
        return self.message


class CouplingOverflowError(ParticleMFGError, ArithmeticError):
    """カーネル exp(a^T(x-y)) の指数が上限を超えた"""

    def __init__(self, exponent: float, limit: float):
        self.exponent = exponent
        self.limit = limit
        super().__init__(
            f"カーネルの指数 a^T(x-y) = {exponent:.6g} が上限 {limit:g} を超えました"
        )


class TrainingError(ParticleMFGError, RuntimeError):
    """損失または勾配が非有限値になった"""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        where = f" (step {step})" if step is not None else ""
        super().__init__(f"{message}{where}")


class IntegrationError(ParticleMFGError, RuntimeError):
    """ODE積分中に非有限値が出た"""

    def __init__(self, particle: int, step: int):
        self.particle = particle
        self.step = step
        super().__init__(f"積分が発散しました: particle={particle}, step={step}")


class OptimizationError(ParticleMFGError, RuntimeError):
    """粒子更新で非有限値が出た"""

    def __init__(self, particle: int, node: int):
        self.particle = particle
        self.node = node
        super().__init__(f"粒子更新が発散しました: particle={particle}, node={node}")
