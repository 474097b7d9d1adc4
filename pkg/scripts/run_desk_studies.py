"""Desk-scale studies: studentized normality, regret scaling and error decay.

    python3 scripts/run_desk_studies.py --out out/desk [--only normality regret decay]
                                        [--trials N] [--workers N]

Writes one JSON summary per study plus per-trial CSVs and prints a short table.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import time
from pathlib import Path

import numpy as np

from mcbandit.sim import (
    DESK_HORIZON,
    DESK_RECIPE,
    benchmark_forms,
    desk_truth,
    error_decay_study,
    normality_study,
    regret_scaling_study,
)

SEED = 2024
REGRET_HORIZONS = (10000, 15000, 20000, 25000, 30000, 35000, 40000)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_normality(truth, out: Path, trials: int, workers: int) -> None:
    config = DESK_RECIPE.config(truth, DESK_HORIZON, SEED)
    res = normality_study(truth, config, benchmark_forms(*truth.shape), trials, SEED, workers)
    keys = list(res.rows[0])
    write_csv(out / "normality_trials.csv", keys, [[row[k] for k in keys] for row in res.rows])
    write_csv(out / "sigma_sq.csv", [f"arm{a}" for a in range(res.sigma_sq.shape[1])], res.sigma_sq.tolist())
    share = float(np.mean(np.all(np.abs(res.sigma_sq - 1.0) <= 0.15, axis=1)))
    write_json(out / "normality_summary.json", {"forms": res.summary, "sigma_sq_share_within_15pct": share})
    for name, s in res.summary.items():
        print(f"  {name:16s} KS {s['ks_statistic']:.3f}  coverage {s['coverage']:.3f}  "
              f"mean {s['mean']:+.3f}  sd {s['sd']:.3f}")
    print(f"  sigma^2 within 15% on every arm: {share:.3f}")


def run_regret(truth, out: Path, trials: int, workers: int) -> None:
    res = regret_scaling_study(truth, DESK_RECIPE, REGRET_HORIZONS, trials, SEED, workers)
    write_csv(out / "regret_trials.csv", ["T", "trial", "regret"], res.rows)
    write_json(out / "regret_fit.json", {"table": res.table, "fit": res.fit})
    for row in res.table:
        print(f"  T={row['T']:6d}  mean regret {row['mean_regret']:9.1f} +- {row['se_regret']:.1f}")
    print(f"  R^2 {res.fit['r_squared']:.4f}  last/first {res.fit['ratio_last_first']:.3f} "
          f"(reference {res.fit['ratio_reference']:.3f})")


def run_decay(truth, out: Path, trials: int, workers: int) -> None:
    res = error_decay_study(truth, DESK_RECIPE, 5000, 4, trials, SEED, workers)
    write_json(out / "error_decay.json", res)
    print(f"  median ||M_hat - M||_F^2 ratio {res['median_ratio']:.3f} (reference {res['reference']:.3f})")


STUDIES = {"normality": (run_normality, 300), "regret": (run_regret, 30), "decay": (run_decay, 30)}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="out/desk")
    parser.add_argument("--only", nargs="+", choices=sorted(STUDIES), default=list(STUDIES))
    parser.add_argument("--trials", type=int, help="override the per-study trial count")
    parser.add_argument("--workers", type=int, default=len(os.sched_getaffinity(0)))
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = desk_truth(1)
    print(f"truth: d={truth.shape}, lambda_max {truth.lambda_max:.1f}, lambda_min {truth.lambda_min:.1f}")
    for name in args.only:
        fn, default_trials = STUDIES[name]
        start = time.perf_counter()
        print(f"{name}:")
        fn(truth, out, args.trials or default_trials, args.workers)
        print(f"  ({time.perf_counter() - start:.0f} s)")


if __name__ == "__main__":
    main()
