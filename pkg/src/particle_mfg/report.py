#!/usr/bin/env python3
"""
実行レポート
- エポックごとの診断値 (目的関数の内訳, 残差, 損失, 経過時間)
- 終端分布の要約統計
- CSV / JSON / ネットワーク / アンサンブルの書き出し (全てアトミック)
"""

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__
from .artifacts import atomic_write_text
from .config import SolverConfig, config_items, format_value
from .ensemble import ParticleEnsemble, save_ensemble_csv
from .neuralnet import MLP, save_mlp
from .particleopt import ObjectiveBreakdown

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

REPORT_COLUMNS = [
    "epoch", "dynamic", "interaction", "terminal", "total",
    "residual", "fm_loss", "clf_loss", "wall_ms",
]


@dataclass
class EpochRecord:
    """1エポック (または架空プレイの1ラウンド) の診断値"""
    epoch: int
    objective: ObjectiveBreakdown
    residual: float
    fm_loss: Optional[float] = None
    clf_loss: Optional[float] = None
    wall_ms: Optional[float] = None


@dataclass
class RunReport:
    """run / fictitious_play_run の結果"""
    records: list[EpochRecord] = field(default_factory=list)
    terminal_mean: tuple[float, ...] = ()
    terminal_cov_diag: tuple[float, ...] = ()
    final_ensemble: Optional[ParticleEnsemble] = None
    mixture_masses: list[tuple[float, ...]] = field(default_factory=list)  # 架空プレイのみ
    classifier: Optional[MLP] = None  # KL 終端コストの学習済み分類器

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError(f"エポック番号が単調増加ではありません: {record.epoch}")
        self.records.append(record)

    @property
    def last(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None

    def summarize_terminal(self, ens: ParticleEnsemble) -> None:
        """終端時刻の座標ごとの平均・分散を記録"""
        self.final_ensemble = ens
        if ens.n == 0:
            self.terminal_mean, self.terminal_cov_diag = (), ()
            return
        self.terminal_mean = tuple(float(v) for v in ens.terminal.mean(axis=0))
        self.terminal_cov_diag = tuple(float(v) for v in ens.terminal.var(axis=0))


class RunAborted(RuntimeError):
    """エポック途中で失敗した (それまでのレポートを保持)"""

    def __init__(self, epoch: int, cause: Exception, report: RunReport):
        self.epoch = epoch
        self.cause = cause
        self.report = report
        super().__init__(f"エポック {epoch} で中断しました: {cause}")


def _cell(value: Optional[float]) -> str:
    return "" if value is None else format(value, ".17g")


def report_to_csv(report: RunReport, include_wall_time: bool = False) -> str:
    """
    1行1エポックのCSV文字列

    Args:
        report: 実行レポート
        include_wall_time: wall_ms 列に値を入れる (既定は空欄で実行間のバイト一致を保つ)

    Returns:
        CSV文字列
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in report.records:
        writer.writerow([
            r.epoch,
            _cell(r.objective.dynamic),
            _cell(r.objective.interaction),
            _cell(r.objective.terminal),
            _cell(r.objective.total),
            _cell(r.residual),
            _cell(r.fm_loss),
            _cell(r.clf_loss),
            _cell(r.wall_ms) if include_wall_time else "",
        ])
    return buf.getvalue()


def summary_dict(report: RunReport, config: SolverConfig) -> dict:
    """JSON サマリーの内容"""
    last = report.last
    final = None
    if last is not None:
        final = {
            "epoch": last.epoch,
            "dynamic": last.objective.dynamic,
            "interaction": last.objective.interaction,
            "terminal": last.objective.terminal,
            "total": last.objective.total,
            "residual": last.residual,
            "fm_loss": last.fm_loss,
            "clf_loss": last.clf_loss,
        }
    return {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "config": {key: format_value(value) for key, value in config_items(config)},
        "epochs_completed": len(report.records),
        "final": final,
        "terminal": {
            "mean": list(report.terminal_mean),
            "cov_diag": list(report.terminal_cov_diag),
        },
    }


def write_run_artifacts(
    report: RunReport,
    config: SolverConfig,
    net: Optional[MLP],
    out_dir: str | Path,
    include_wall_time: bool = False,
) -> dict[str, Path]:
    """
    実行結果を out_dir に書き出す

    Args:
        report: 実行レポート
        config: 使用した設定
        net: 学習済み速度場 (None なら保存しない)
        out_dir: 出力ディレクトリ
        include_wall_time: report.csv に経過時間を入れる

    Returns:
        名前 -> 書き出したパス
    """
    out_dir = Path(out_dir)
    paths = {
        "report": atomic_write_text(out_dir / "report.csv", report_to_csv(report, include_wall_time)),
        "summary": atomic_write_text(
            out_dir / "summary.json",
            json.dumps(summary_dict(report, config), indent=2, sort_keys=True, allow_nan=True) + "\n",
        ),
    }
    if net is not None:
        paths["velocity"] = save_mlp(net, out_dir / "velocity.bin")
    if report.classifier is not None:
        paths["classifier"] = save_mlp(report.classifier, out_dir / "classifier.bin")
    if report.final_ensemble is not None:
        paths["ensemble"] = save_ensemble_csv(report.final_ensemble, out_dir / "ensemble.csv")
    logger.info(f"Wrote {len(paths)} artifacts to {out_dir}")
    return paths



def sweep_to_csv(key: str, results: list[tuple[str, RunReport]]) -> str:
    """
    パラメータ掃引の要約CSV (1行1設定値, 最終エポックの診断値と終端平均)

    Args:
        key: 掃引した設定キー
        results: (設定値, レポート) の一覧

    Returns:
        CSV文字列
    """
    d = max((len(r.terminal_mean) for _, r in results), default=0)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([key, "epochs", "total", "residual"] + [f"terminal_mean_{k}" for k in range(d)])
    for value, report in results:
        last = report.last
        means = list(report.terminal_mean) + [None] * (d - len(report.terminal_mean))
        writer.writerow(
            [value, len(report.records),
             _cell(last.objective.total if last else None), _cell(last.residual if last else None)]
            + [_cell(v) for v in means]
        )
    return buf.getvalue()
