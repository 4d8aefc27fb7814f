#!/usr/bin/env python3
"""CLI entry point for the particle-based mean-field game solver."""

import argparse
import logging
import sys
import threading
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .artifacts import atomic_write_text
from .config import (
    PRESETS,
    SolverConfig,
    echo_config,
    env_defaults,
    parse_config,
)
from .couplings import KLTerminal, LogitTerminal, snapshots
from .ensemble import TimeGrid, load_ensemble_csv, sample_initial, save_ensemble_csv
from .errors import ConfigurationError
from .flowmatch import integrate
from .neuralnet import load_mlp
from .particleopt import objective, residual
from .report import EpochRecord, RunAborted, RunReport, sweep_to_csv, write_run_artifacts
from .solver import STREAM_SAMPLE, quadratic_oc_oracle, run, stream_seed

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

DEFAULT_OUT_DIR = "out"

# Braille spinner pattern
SPINNER_FRAMES = ['⣾', '⣽', '⣻', '⢿', '⡿', '⣟', '⣯', '⣷']


class ProgressSpinner:
    """Progress indicator with spinner and percentage, one step per epoch."""

    def __init__(self, total: int):
        self.total = total
        self.current = 0
        self.label = ""
        self.spinning = False
        self.spinner_thread: Optional[threading.Thread] = None
        self.frame_index = 0

    def _get_progress_bar(self, width: int = 20) -> str:
        """Generate a progress bar string."""
        if self.total == 0:
            return "─" * width
        filled = int(width * self.current / self.total)
        return "█" * filled + "─" * (width - filled)

    def _get_percentage(self) -> int:
        """Calculate current percentage."""
        if self.total == 0:
            return 0
        return int(100 * self.current / self.total)

    def _status(self, icon: str) -> str:
        return (f"{icon} {self._get_percentage():3d}% {self._get_progress_bar()} "
                f"[{self.current}/{self.total}] {self.label}")

    def _spin(self):
        """Spinner animation thread."""
        while self.spinning:
            frame = SPINNER_FRAMES[self.frame_index % len(SPINNER_FRAMES)]
            sys.stdout.write(f"\r\033[K{self._status(frame)}")
            sys.stdout.flush()
            self.frame_index += 1
            time.sleep(0.1)

    def start(self, label: str):
        """Start spinner for an epoch."""
        self.label = label
        self.spinning = True
        self.spinner_thread = threading.Thread(target=self._spin, daemon=True)
        self.spinner_thread.start()

    def stop(self, success: bool = True, label: Optional[str] = None):
        """Stop spinner and show result (updates same line)."""
        self.spinning = False
        if self.spinner_thread:
            self.spinner_thread.join(timeout=0.2)
        self.current += 1
        if label is not None:
            self.label = label
        sys.stdout.write(f"\r\033[K{self._status('✓' if success else '✗')}")
        sys.stdout.flush()

    def finish(self):
        """Print final newline when all processing is complete."""
        sys.stdout.write("\n")
        sys.stdout.flush()


def _print_block(title: str, rows: Sequence[tuple[str, object]]) -> None:
    print(f"{'='*60}")
    print(title)
    print(f"{'='*60}")
    for key, value in rows:
        print(f"{key}: {value}")
    print(f"{'='*60}\n")


def _load_config(args: argparse.Namespace, *extra: str) -> SolverConfig:
    overrides = list(args.set or []) + list(extra)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"solver.seed={args.seed}")
    return parse_config(path=args.config, preset=args.preset, overrides=overrides)


def _resolve_defaults(args: argparse.Namespace) -> tuple[Path, int]:
    """Command-line flag > environment > .env > built-in default."""
    env = env_defaults(args.env_file)
    out_dir = Path(args.out_dir or env["out_dir"] or DEFAULT_OUT_DIR)
    threads_raw = args.threads if args.threads is not None else env["threads"]
    try:
        threads = int(threads_raw) if threads_raw is not None else 1
    except ValueError:
        raise ConfigurationError(f"PARTICLE_MFG_THREADS must be an integer: {threads_raw!r}") from None
    if threads < 1:
        raise ConfigurationError(f"--threads must be >= 1: {threads}")
    return out_dir, threads


def cmd_run(args: argparse.Namespace) -> int:
    """Execute the solver and write report.csv, summary.json, velocity.bin, ensemble.csv."""
    config = _load_config(args)
    out_dir, threads = _resolve_defaults(args)

    if not args.quiet:
        _print_block("Configuration", [
            ("preset", args.preset or "-"),
            ("config", args.config or "-"),
            ("epochs", config.epochs),
            ("particles", f"n={config.n}, d={config.d}, m={config.m}"),
            ("threads", threads),
            ("out-dir", out_dir),
        ])
    logger.debug("Config:\n" + echo_config(config))

    progress = None if args.quiet else ProgressSpinner(config.epochs)

    def on_start(k: int, total: int) -> None:
        if progress:
            progress.start(f"epoch {k}")

    def on_end(record: EpochRecord, total: int) -> None:
        if progress:
            progress.stop(True, f"epoch {record.epoch} residual={record.residual:.4g}")

    try:
        net, report = run(config, workers=threads, on_epoch_start=on_start, on_epoch_end=on_end)
    except RunAborted as e:
        if progress:
            progress.stop(False)
            progress.finish()
        write_run_artifacts(e.report, config, None, out_dir, args.wall_time)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    if progress:
        progress.finish()
    paths = write_run_artifacts(report, config, net, out_dir, args.wall_time)

    if not args.quiet:
        last = report.last
        rows: list[tuple[str, object]] = [("Epochs completed", len(report.records))]
        if last is not None:
            rows += [
                ("Final objective", f"{last.objective.total:.6g}"),
                ("Final residual", f"{last.residual:.6g}"),
                ("Terminal mean", ", ".join(f"{v:.4g}" for v in report.terminal_mean)),
                ("Terminal var", ", ".join(f"{v:.4g}" for v in report.terminal_cov_diag)),
            ]
        rows += [(name, path) for name, path in paths.items()]
        _print_block("Summary", rows)
    return EXIT_OK


def cmd_residual(args: argparse.Namespace) -> int:
    """Recompute the first-order residual on a saved ensemble."""
    config = _load_config(args)
    out_dir, _ = _resolve_defaults(args)
    path = Path(args.ensemble) if args.ensemble else out_dir / "ensemble.csv"
    ens = load_ensemble_csv(path)
    if ens.d != config.d:
        raise ConfigurationError(f"ensemble dimension {ens.d} does not match config dimension {config.d}")

    terminal = config.terminal
    if isinstance(terminal, KLTerminal):
        # KL terminal: G is the logit of the classifier saved by `run`
        terminal = LogitTerminal(load_mlp(args.classifier or out_dir / "classifier.bin"))
        terminal.validate(config.d)

    pop = snapshots(ens)
    value = residual(ens, config.interaction, terminal, pop)
    print(f"{value:.17g}")
    if args.verbose:
        obj = objective(ens, config.interaction, terminal, pop)
        print(f"dynamic={obj.dynamic:.17g} interaction={obj.interaction:.17g} "
              f"terminal={obj.terminal:.17g} total={obj.total:.17g}", file=sys.stderr)
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    """Integrate a saved velocity network from fresh initial draws and dump trajectories."""
    config = _load_config(args)
    out_dir, threads = _resolve_defaults(args)
    net = load_mlp(args.network or out_dir / "velocity.bin")
    n = args.n if args.n is not None else config.n
    x0 = sample_initial(config.initial, n, stream_seed(config.seed, 0, STREAM_SAMPLE))
    ens = integrate(net, x0, TimeGrid(config.m), config.integrator, threads)
    path = save_ensemble_csv(ens, args.output or out_dir / "samples.csv")
    if not args.quiet:
        print(f"Wrote {ens.n} trajectories to {path}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    """Run the solver once per value of one config key and write sweep.csv."""
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigurationError("--values needs at least one value")
    out_dir, threads = _resolve_defaults(args)
    # All points are validated before the first run
    configs = [_load_config(args, f"{args.key}={value}") for value in values]

    progress = None if args.quiet else ProgressSpinner(len(values))
    results: list[tuple[str, RunReport]] = []
    status = EXIT_OK
    for value, config in zip(values, configs):
        run_dir = out_dir / f"{args.key}={value}"
        if progress:
            progress.start(f"{args.key}={value}")
        try:
            net, report = run(config, workers=threads)
        except RunAborted as e:
            if progress:
                progress.stop(False)
            write_run_artifacts(e.report, config, None, run_dir)
            print(f"\nError: {args.key}={value}: {e}", file=sys.stderr)
            results.append((value, e.report))
            status = EXIT_RUNTIME
            continue
        write_run_artifacts(report, config, net, run_dir)
        results.append((value, report))
        if progress:
            last = report.last
            progress.stop(True, f"{args.key}={value}" + (f" residual={last.residual:.4g}" if last else ""))

    if progress:
        progress.finish()
    path = atomic_write_text(out_dir / "sweep.csv", sweep_to_csv(args.key, results))
    if not args.quiet:
        print(f"Wrote {path}")
    return status


def cmd_oracle(args: argparse.Namespace) -> int:
    """Emit closed-form quadratic optimal-control trajectories."""
    out_dir, _ = _resolve_defaults(args)
    try:
        starts = np.array([[float(v) for v in item.split(",")] for item in args.x0 or ["1"]])
    except ValueError as e:
        raise ConfigurationError(f"--x0 must be comma-separated numbers: {e}") from None
    if args.m < 1:
        raise ConfigurationError(f"-m must be >= 1: {args.m}")
    ens = quadratic_oc_oracle(args.lam, args.g, starts, TimeGrid(args.m))
    path = save_ensemble_csv(ens, args.output or out_dir / "oracle.csv")
    if not args.quiet:
        print(f"Wrote {ens.n} oracle trajectories to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--out-dir", "-o",
        help=f"Output directory (env: PARTICLE_MFG_OUT_DIR, default: {DEFAULT_OUT_DIR})"
    )
    common.add_argument(
        "--threads", "-j",
        type=int,
        help="Worker threads for trajectory integration (env: PARTICLE_MFG_THREADS, default: 1)"
    )
    common.add_argument(
        "--env-file", "-e",
        help="Path to .env file (default: ./.env or ~/.config/particle-mfg/.env)"
    )
    common.add_argument("--verbose", action="store_true", help="Enable debug logging")
    common.add_argument("--quiet", "-q", action="store_true", help="Suppress progress and summaries")

    configured = argparse.ArgumentParser(add_help=False)
    configured.add_argument("--config", "-c", help="Path to a key=value config file")
    configured.add_argument(
        "--preset", "-p",
        choices=sorted(PRESETS),
        help="Experiment preset (a config file and --set are layered on top)"
    )
    configured.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config key (can be specified multiple times)"
    )
    configured.add_argument("--seed", type=int, help="Override solver.seed")

    parser = argparse.ArgumentParser(
        prog="particle-mfg",
        description="Particle-based flow-matching solver for first-order mean-field games"
    )
    parser.add_argument(
        "--version", "-v",
        action="version",
        version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[common, configured], help="Run the solver")
    p_run.add_argument(
        "--wall-time",
        action="store_true",
        help="Fill the wall_ms column of report.csv (off by default so reruns are byte-identical)"
    )
    p_run.set_defaults(func=cmd_run)

    p_res = sub.add_parser("residual", parents=[common, configured],
                           help="Recompute the residual of a saved ensemble")
    p_res.add_argument("ensemble", nargs="?", help="Ensemble CSV (default: <out-dir>/ensemble.csv)")
    p_res.add_argument(
        "--classifier",
        help="Classifier network for KL terminal costs (default: <out-dir>/classifier.bin)"
    )
    p_res.set_defaults(func=cmd_residual)

    p_sample = sub.add_parser("sample", parents=[common, configured],
                              help="Integrate a saved velocity network")
    p_sample.add_argument("--network", help="Velocity network file (default: <out-dir>/velocity.bin)")
    p_sample.add_argument("-n", type=int, help="Number of trajectories (default: particles.n)")
    p_sample.add_argument("--output", help="Output CSV (default: <out-dir>/samples.csv)")
    p_sample.set_defaults(func=cmd_sample)

    p_sweep = sub.add_parser("sweep", parents=[common, configured],
                             help="Run once per value of a config key (e.g. particle-count sensitivity)")
    p_sweep.add_argument("--key", "-k", required=True, help="Config key to vary (e.g. particles.n)")
    p_sweep.add_argument("--values", required=True, help="Comma-separated values (e.g. 500,2000,8000)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_oracle = sub.add_parser("oracle", parents=[common],
                              help="Emit closed-form quadratic optimal-control trajectories")
    p_oracle.add_argument("--lam", type=float, default=1.0, help="Running cost weight (default: 1)")
    p_oracle.add_argument("--g", type=float, default=1.0, help="Terminal cost weight (default: 1)")
    p_oracle.add_argument(
        "--x0",
        action="append",
        default=None,
        help="Start point, comma-separated (can be specified multiple times; default: 1)"
    )
    p_oracle.add_argument("-m", type=int, default=100, help="Number of time steps (default: 100)")
    p_oracle.add_argument("--output", help="Output CSV (default: <out-dir>/oracle.csv)")
    p_oracle.set_defaults(func=cmd_oracle)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
