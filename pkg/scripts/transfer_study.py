"""Black-box (surrogate) and cross-method transfer of crafted masks.

    python3 scripts/transfer_study.py --seeds 0 1 2 --out out/transfer
"""

import argparse
import csv
import warnings
from pathlib import Path

from forgetattack import experiment
from forgetattack.config import load_config

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=HERE / "ref.cfg")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", type=Path, default=Path("out/transfer"))
    args = ap.parse_args()
    base = load_config(args.config)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        cfg = base.with_seed(seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            bb = experiment.blackbox_transfer(cfg)
            mt = experiment.method_transfer(cfg)
        rows.append((seed, "whitebox", bb["pre"], bb["white_post"]))
        rows.append((seed, "blackbox", bb["pre"], bb["black_post"]))
        rows += [(seed, m, a, b) for m, (a, b) in mt.items()]
        for r in rows[-(2 + len(mt)):]:
            print(f"seed {r[0]} {r[1]:13s} ECE {r[2]:.4f} -> {r[3]:.4f}")
    with open(args.out / "transfer.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "setting", "pre_ece", "post_ece"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
