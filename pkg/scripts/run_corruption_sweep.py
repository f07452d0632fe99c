#!/usr/bin/env python3
"""Occurrence-frequency tables: how often a single-position corruption beats the trained prompt.

Trains one CE prompt per shot count, then sweeps REPLACE variances and RESCALE
factors over every position and reports seed-averaged exceedance counts.
"""

from __future__ import annotations

import argparse
import csv
from pathlib import Path

from promptnorm.harness import (ModelConfig, TrainConfig, count_low_norm_occurrences,
                                corruption_sweep, default_grids, train)
from promptnorm.losses import PUNConfig


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--shots", type=int, nargs="+", default=[1, 2, 4, 8, 16])
    parser.add_argument("--seeds", type=int, default=5, help="sweep seeds for REPLACE draws")
    parser.add_argument("--epochs", type=int, default=200)
    parser.add_argument("--mode", choices=["ce", "pun"], default="ce")
    parser.add_argument("--omega", type=float, default=10.0, help="PUN weight when --mode pun")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", default="out/corruption_sweep")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seeds))
    rows = []
    for shots in args.shots:
        cfg = TrainConfig(model=ModelConfig(shots=shots), epochs=args.epochs, mode=args.mode,
                          pun=PUNConfig(args.omega))
        prompt, report = train(cfg)
        enc, task = cfg.model.build()
        table = corruption_sweep(prompt, task, enc, default_grids(), seeds,
                                 cfg.model.temperature, args.workers)
        low = count_low_norm_occurrences(table)
        print(f"\nshots={shots}  test acc {report.final.test_accuracy:.4f}  "
              f"mean norm {report.final.mean_norm:.3f}")
        for s in table.summary():
            print(f"  {s['arm']:8} {s['parameter']:>6g} {s['direction']:>5}  {s['count_mean']:5.1f} / "
                  f"{prompt.length}")
            rows.append([shots, s["arm"], s["parameter"], s["direction"], s["count_mean"]])
        print(f"  low-norm occurrences {low.low_norm:g}, norm-increasing {low.norm_increasing:g}")
        rows.append([shots, "low_norm_total", "", "down", low.low_norm])
        with open(out / f"cells_shots{shots}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "arm", "parameter", "position", "accuracy_base",
                        "accuracy_corrupted", "norm_before", "norm_after", "exceeds"])
            for c in table.cells:
                w.writerow([c.seed, c.arm, c.parameter, c.position, c.accuracy_base,
                            c.accuracy_corrupted, c.norm_before, c.norm_after, int(c.exceeds)])
    with open(out / "frequency_by_shots.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["shots", "arm", "parameter", "direction", "count_mean"])
        w.writerows(rows)
    print(f"\nwrote {out}/frequency_by_shots.csv and per-shot cell files")


if __name__ == "__main__":
    main()
