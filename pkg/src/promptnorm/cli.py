"""Command-line entry point.

    promptnorm train     [--config F] [--seed N] [--out-dir D] [--set sec.key=val ...]
    promptnorm sweep     --checkpoint F [--config F] [--seed N] [--out-dir D] [--workers K]
    promptnorm report    [--out-dir D]
    promptnorm selfcheck

Exit codes: 0 success, 1 usage, 2 config, 3 runtime.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

from promptnorm.configfile import ConfigError, RunSettings, load_config
from promptnorm.harness import (ModelConfig, RunReport, TrainingDiverged,
                                count_low_norm_occurrences, corruption_sweep, train)
from promptnorm.persist import (Checkpoint, CheckpointError, emit_reports, load_checkpoint,
                                read_report, save_checkpoint)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("promptnorm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="sectioned config file (defaults if omitted)")
    common.add_argument("--seed", type=int, help="training seed (train) or the single sweep seed")
    common.add_argument("--out-dir", help="output directory (overrides io.out_dir)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="promptnorm", description="Soft-prompt norm experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train a soft prompt")
    sweep = sub.add_parser("sweep", parents=[common], help="corruption sweep of a checkpoint")
    sweep.add_argument("--checkpoint", required=True)
    sweep.add_argument("--workers", type=int, help="worker processes (overrides io.workers)")
    sub.add_parser("report", parents=[common], help="summarize a run directory")
    sub.add_parser("selfcheck", help="run the gradient and invariant checks")
    return parser


def _settings(args) -> RunSettings:
    overrides = list(args.set)
    if args.seed is not None and args.command == "train":
        overrides.append(f"train.seed={args.seed}")
    if args.seed is not None and args.command == "sweep":
        overrides.append(f"sweep.seeds={args.seed}")
    if args.out_dir is not None:
        overrides.append(f"io.out_dir={args.out_dir}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"io.workers={args.workers}")
    return load_config(args.config, overrides)


def cmd_train(settings: RunSettings) -> int:
    cfg = settings.train
    out = Path(settings.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        prompt, report = train(cfg)
    except TrainingDiverged as exc:
        emit_reports(exc.report, out, cfg.model.length)
        raise
    ckpt = out / "checkpoint.json"
    save_checkpoint(ckpt, Checkpoint(prompt, cfg.model.task_seed, cfg.model.encoder_seed,
                                     cfg.epochs, cfg.mode, dataclasses.asdict(cfg.model)))
    report.checkpoint = ckpt.name
    emit_reports(report, out, cfg.model.length)
    final = report.final
    print(f"trained {cfg.epochs} epochs (mode={cfg.mode}, seed={cfg.seed}): "
          f"test accuracy {final.test_accuracy:.4f}, mean prompt norm {final.mean_norm:.4f}")
    print(f"wrote {out}/checkpoint.json, trace.csv, frequency.csv, report.json")
    return EXIT_OK


def cmd_sweep(settings: RunSettings, checkpoint: str) -> int:
    started = time.perf_counter()
    ckpt = load_checkpoint(checkpoint)
    model = ModelConfig(**ckpt.model) if ckpt.model else dataclasses.replace(
        settings.train.model, task_seed=ckpt.task_seed, encoder_seed=ckpt.encoder_seed)
    if (model.length, model.dim) != (ckpt.prompt.length, ckpt.prompt.dim):
        raise ConfigError(checkpoint, None, "model", "length",
                          f"checkpoint prompt is {ckpt.prompt.length}×{ckpt.prompt.dim}, "
                          f"model expects {model.length}×{model.dim}")
    enc, task = model.build()
    table = corruption_sweep(ckpt.prompt, task, enc, settings.sweep_grids, settings.sweep_seeds,
                             model.temperature, settings.workers)
    low = count_low_norm_occurrences(table)
    report = RunReport(
        config={"model": dataclasses.asdict(model),
                "sweep": {"grids": [dataclasses.asdict(g) for g in settings.sweep_grids],
                          "seeds": list(settings.sweep_seeds)}},
        frequency=table, seeds=list(settings.sweep_seeds), checkpoint=str(checkpoint),
        summary={"low_norm": dataclasses.asdict(low)},
    )
    report.wall_clock_seconds = time.perf_counter() - started
    out = Path(settings.out_dir)
    emit_reports(report, out, model.length)
    _print_frequency(report)
    print(f"wrote {out}/trace.csv, frequency.csv, report.json")
    return EXIT_OK


def _print_frequency(report: RunReport) -> None:
    table = report.frequency
    if table is None or not table.cells:
        print("no corruption sweep in this run")
        return
    arrow = {"down": "↓", "up": "↑", "flat": "="}
    print(f"{'arm':8} {'parameter':>10}  norm  exceedances (mean over seeds {table.seeds})")
    for row in table.summary():
        print(f"{row['arm']:8} {row['parameter']:>10g}  {arrow[row['direction']]:^4}  "
              f"{row['count_mean']:g}")
    low = count_low_norm_occurrences(table)
    print(f"low-norm occurrences (norm-reducing parameters): {low.low_norm:g}")
    print(f"exceedances under norm-increasing parameters: {low.norm_increasing:g}")


def cmd_report(settings: RunSettings) -> int:
    path = Path(settings.out_dir) / "report.json"
    if not path.exists():
        print(f"report not found: {path}", file=sys.stderr)
        return EXIT_RUNTIME
    report = read_report(path)
    final = report.final
    if final is not None:
        first = report.trace.records[0]
        print(f"epochs: {final.epoch}  seeds: {report.seeds}  status: {report.status}")
        print(f"test accuracy: {first.test_accuracy:.4f} (epoch 1) -> {final.test_accuracy:.4f}")
        print(f"mean prompt norm: {first.mean_norm:.4f} (epoch 1) -> {final.mean_norm:.4f}")
        selected = [sum(r.alpha_counts[j] for r in report.trace.records)
                    for j in range(len(final.norms))]
        if any(selected):
            print("PAN selections per position: " + " ".join(str(s) for s in selected))
    _print_frequency(report)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "selfcheck":
        from promptnorm.selfcheck import run_all
        return EXIT_OK if run_all() else EXIT_RUNTIME
    try:
        settings = _settings(args)
        if args.command == "train":
            return cmd_train(settings)
        if args.command == "sweep":
            return cmd_sweep(settings, args.checkpoint)
        return cmd_report(settings)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_RUNTIME
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
