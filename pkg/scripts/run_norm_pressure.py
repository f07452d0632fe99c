#!/usr/bin/env python3
"""Final prompt norm and test accuracy of CE-only vs norm-regularized training, over seeds."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
from pathlib import Path

from promptnorm.harness import ModelConfig, TrainConfig, multi_seed
from promptnorm.losses import PANConfig, PUNConfig


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--epochs", type=int, default=200)
    parser.add_argument("--shots", type=int, default=8)
    parser.add_argument("--omegas", type=float, nargs="+", default=[1.0, 10.0, 50.0])
    parser.add_argument("--with-pan", action="store_true", help="also run PAN (tau 0.5, N 1)")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", default="out/norm_pressure")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    base = TrainConfig(model=ModelConfig(shots=args.shots), epochs=args.epochs)
    variants = {"ce": base}
    for w in args.omegas:
        variants[f"pun_w{w:g}"] = dataclasses.replace(base, mode="pun", pun=PUNConfig(w))
    if args.with_pan:
        variants["pan"] = dataclasses.replace(base, mode="pan", pan=PANConfig(1.0, 0.5, 1))

    seeds = list(range(args.seeds))
    results = {name: multi_seed(cfg, seeds, args.workers) for name, cfg in variants.items()}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "status", "test_accuracy", "mean_norm"])
        for name, agg in results.items():
            for r in agg["runs"]:
                w.writerow([name, r["seed"], r["status"], r.get("test_accuracy"),
                            r.get("mean_norm")])
    slim = {k: {kk: vv for kk, vv in v.items() if kk != "runs"} for k, v in results.items()}
    (out / "summary.json").write_text(json.dumps(slim, indent=2, sort_keys=True) + "\n")

    ce_norms = {r["seed"]: r["mean_norm"] for r in results["ce"]["runs"] if r["status"] == "ok"}
    print(f"{'variant':12} {'acc mean':>9} {'acc std':>8} {'norm mean':>10}  lower norm than CE")
    for name, agg in results.items():
        lower = sum(1 for r in agg["runs"]
                    if r["status"] == "ok" and r["mean_norm"] < ce_norms.get(r["seed"], -1))
        print(f"{name:12} {agg['test_accuracy_mean']:9.4f} {agg['test_accuracy_std']:8.4f} "
              f"{agg['mean_norm_mean']:10.4f}  {lower}/{len(agg['runs'])}")
    print(f"wrote {out}/runs.csv and summary.json")


if __name__ == "__main__":
    main()
