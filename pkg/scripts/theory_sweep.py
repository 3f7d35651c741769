"""Kappa sweep for logistic overconfidence; writes the CSV and prints the fit.

    python3 scripts/theory_sweep.py --trials 200 --out out/theory
"""

import argparse
from dataclasses import replace
from pathlib import Path

from forgetattack import theory
from forgetattack.config import load_config

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=HERE / "thm.cfg")
    ap.add_argument("--trials", type=int)
    ap.add_argument("--kappas", type=float, nargs="+")
    ap.add_argument("--out", type=Path, default=Path("out/theory"))
    args = ap.parse_args()
    cfg = load_config(args.config).theory
    if args.trials:
        cfg = replace(cfg, trials=args.trials)
    if args.kappas:
        cfg = replace(cfg, kappas=tuple(args.kappas))
    rows = theory.simulate_calibration(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    theory.write_csv(rows, args.out / "kappa_sweep.csv")
    for r in rows:
        print(f"kappa {r['kappa']:.3f}  p {r['p']:.2f}  delta {r['delta_cal']}  n_in_bin {r['n_in_bin']}")
    for p in cfg.p_grid:
        fit = theory.fit_slope(rows, p)
        print(f"p={p}: slope {fit.slope:.4f}  spearman {fit.spearman:+.2f}  r2 {fit.r2:.3f}")


if __name__ == "__main__":
    main()
