"""Write a synthetic logged-bandit CSV and replay it through the CLI.

    python3 scripts/replay_synthetic.py [--records N] [--out out/replay]

The log has a uniform logging policy over two arms on a 34 x 22 grid, the
shape of a small parking-occupancy table.  The replay settings come from
scripts/configs/replay_synthetic.yaml with the log path filled in.
"""
from __future__ import annotations

import argparse
import csv
from pathlib import Path

import numpy as np
import yaml

from mcbandit.cli import main as cli_main
from mcbandit.sim import generate_truth, make_truth, reward

CONFIG = Path(__file__).parent / "configs" / "replay_synthetic.yaml"


def write_log(path: Path, n: int, seed: int) -> None:
    base = generate_truth(34, 22, 2, 2, 1.0, np.random.default_rng(seed))
    # rescale into an occupancy-like range: mean 0.7, spread 0.1
    mats = 0.7 + 0.1 * (base.matrices - base.matrices.mean()) / base.matrices.std()
    truth = make_truth(list(mats), 3, sigmas=0.05)
    g = np.random.default_rng(seed + 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["j1", "j2", "action", "reward", "order"])
        for i in range(n):
            x = (int(g.integers(34)), int(g.integers(22)))
            a = int(g.integers(2))
            w.writerow([x[0], x[1], a, f"{reward(truth, x, a, g):.6f}", i])


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--records", type=int, default=60000)
    parser.add_argument("--out", default="out/replay")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = out / "synthetic_log.csv"
    write_log(log, args.records, args.seed)
    cfg = yaml.safe_load(CONFIG.read_text())
    cfg["log"]["path"] = str(log)
    cfg_path = out / "replay.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return cli_main(["replay", "--config", str(cfg_path), "--out", str(out / "result")])


if __name__ == "__main__":
    raise SystemExit(main())
