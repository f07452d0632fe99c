#!/usr/bin/env python3
"""Per-epoch test accuracy and prompt norms for CE, PUN and PAN runs (plot-ready CSV)."""

from __future__ import annotations

import argparse
import csv
import dataclasses
from pathlib import Path

from promptnorm.harness import ModelConfig, TrainConfig, norm_telemetry, train
from promptnorm.losses import OmegaSchedule, PANConfig, PUNConfig


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--epochs", type=int, default=400)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--omega", type=float, default=10.0)
    parser.add_argument("--schedule", action="store_true", help="logistic decay of omega")
    parser.add_argument("--out", default="out/telemetry")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    base = TrainConfig(model=ModelConfig(), epochs=args.epochs, seed=args.seed,
                       schedule=OmegaSchedule(enabled=args.schedule))
    runs = {
        "ce": base,
        "pun": dataclasses.replace(base, mode="pun", pun=PUNConfig(args.omega)),
        "pan": dataclasses.replace(base, mode="pan", pan=PANConfig(args.omega, 0.5, 1)),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, cfg in runs.items():
        _, report = train(cfg)
        with open(out / f"trace_{name}.csv", "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(norm_telemetry(report.trace))
        recs = report.trace.records
        peak = max(recs, key=lambda r: r.mean_norm)
        print(f"{name:4} norm epoch1 {recs[0].mean_norm:.3f}, peak {peak.mean_norm:.3f} "
              f"@{peak.epoch}, final {recs[-1].mean_norm:.3f}; "
              f"test acc final {recs[-1].test_accuracy:.4f}")
    print(f"wrote {out}/trace_{{ce,pun,pan}}.csv")


if __name__ == "__main__":
    main()
