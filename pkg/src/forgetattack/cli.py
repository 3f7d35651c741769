"""Command-line entry point.

    forgetattack <subcommand> [--config FILE] [--seed N] [--out DIR]

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, experiment, metrics, ndcore, theory, unlearn, uq
from .config import ExperimentConfig, load_config
from .errors import ForgetAttackError

SUBCOMMANDS = ("gen-data", "train", "attack", "unlearn", "eval-uq", "theory", "transfer", "run")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="forgetattack", description="Unlearning attacks on predictive uncertainty.")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    helps = {
        "gen-data": "generate the blob dataset (binary + CSV)",
        "train": "train the estimator and save checkpoints",
        "attack": "craft a forget mask against the trained model",
        "unlearn": "apply the unlearning method to a saved model and mask",
        "eval-uq": "calibration / conformal report of a saved model on the test split",
        "theory": "Monte-Carlo calibration-gap sweep over kappa",
        "transfer": "black-box and cross-method transfer study",
        "run": "full pipeline: train, craft, unlearn, evaluate",
    }
    for name in SUBCOMMANDS:
        s = sub.add_parser(name, help=helps[name], description=helps[name])
        s.add_argument("--config", type=Path, help="text config of 'section.key = value' lines")
        s.add_argument("--seed", type=int, help="override every seed in the config")
        s.add_argument("--out", type=Path, help="output directory (default: experiment.out_dir)")
        if name in ("attack", "unlearn", "run"):
            s.add_argument("--mask-kind", choices=("ours", "random", "label_attack", "none"))
        if name == "unlearn":
            s.add_argument("--method", choices=("first_order", "second_order", "unrolling",
                                                "fisher", "ssd", "sisa"))
    return p


def _load(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "mask_kind", None):
        cfg = replace(cfg, mask=args.mask_kind)
    if getattr(args, "method", None):
        cfg = replace(cfg, unlearn=replace(cfg.unlearn, method=args.method))
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _dataset(cfg: ExperimentConfig) -> data.Dataset:
    dc = cfg.data
    return data.gen_blobs(dc.n, dc.d, dc.classes, dc.spread, dc.seed)


def _load_models(out: Path, stem: str = "model") -> list:
    paths = sorted(out.glob(f"{stem}*.uulm"))
    if not paths:
        raise FileNotFoundError(f"no {stem}*.uulm in {out}; run 'train' first")
    return [ndcore.load_model(p) for p in paths]


def cmd_gen_data(cfg, out) -> dict:
    ds = _dataset(cfg)
    data.write_dataset(out / "data.uuad", ds)
    data.write_csv(out / "data.csv", ds)
    return {"n": len(ds), "d": ds.dim, "classes": ds.class_count, "path": "data.uuad"}


def cmd_train(cfg, out) -> dict:
    setup = experiment.prepare(replace(cfg, uq=replace(cfg.uq, conformal=None)))
    for i, m in enumerate(setup.est.models):
        ndcore.save_model(m, out / f"model{i}.uulm")
    for i, m in enumerate(setup.inits):
        ndcore.save_model(m, out / f"init{i}.uulm")
    acc = float((uq.estimate(setup.est, setup.D.features).argmax(1) == setup.D.labels).mean())
    return {"members": len(setup.est.models), "train_accuracy": acc}


def _setup_from_disk(cfg, out) -> experiment.Setup:
    """Rebuild the deterministic setup, swapping in saved checkpoints when present."""
    setup = experiment.prepare(cfg)
    if list(out.glob("model*.uulm")):
        models = _load_models(out)
        setup.est = setup.est.with_models(models)
    return setup


def cmd_attack(cfg, out) -> dict:
    setup = _setup_from_disk(cfg, out)
    mask = experiment.craft_mask(setup)
    unlearn.write_mask(out / "mask.txt", mask)
    return {"mask_path": "mask.txt", "forgotten": int(mask.forget_indices().size),
            "objective": None if np.isnan(mask.objective) else float(mask.objective)}


def cmd_unlearn(cfg, out) -> dict:
    setup = _setup_from_disk(cfg, out)
    mask = unlearn.read_mask(out / "mask.txt")
    state = experiment.apply_mask(setup, mask)
    if isinstance(state, unlearn.ShardedModel):
        unlearn.save_sharded(state, out / "sisa_unlearned")
    else:
        for i, m in enumerate(state.models):
            ndcore.save_model(m, out / f"unlearned{i}.uulm")
    pre = experiment.target_probs(setup, None, setup.X_victims)
    post = experiment.target_probs(setup, state, setup.X_victims)
    r0, r1 = experiment.evaluate(setup, pre), experiment.evaluate(setup, post, pre.argmax(1))
    return {"pre": r0.to_dict(), "post": r1.to_dict(), "increments": metrics.increment_ratios(r0, r1)}


def cmd_eval_uq(cfg, out) -> dict:
    setup = _setup_from_disk(cfg, out)
    ds = _dataset(cfg)
    test = ds.subset(setup.splits.test)
    probs = setup.probs(setup.est, test.features)
    rep = metrics.make_report(probs, test.labels, conformal=setup.conformal, bins=cfg.uq.bins)
    experiment.write_reliability(out / "reliability_test.csv",
                                 {"test": metrics.reliability_table(probs, test.labels, cfg.uq.bins)})
    return {"test": rep.to_dict()}


def cmd_theory(cfg, out) -> dict:
    rows = theory.simulate_calibration(cfg.theory)
    theory.write_csv(rows, out / "kappa_sweep.csv")
    res = {"rows": rows, "csv": "kappa_sweep.csv"}
    try:
        for p in cfg.theory.p_grid:
            fit = theory.fit_slope(rows, p)
            res[f"fit_p{p}"] = {"slope": fit.slope, "spearman": fit.spearman, "r2": fit.r2}
    except ForgetAttackError as exc:
        res["fit_error"] = str(exc)
    return res


def cmd_transfer(cfg, out) -> dict:
    bb = experiment.blackbox_transfer(cfg)
    mt = experiment.method_transfer(cfg)
    with open(out / "transfer.csv", "w") as fh:
        fh.write("setting,pre_ece,post_ece\n")
        fh.write(f"whitebox,{bb['pre']!r},{bb['white_post']!r}\n")
        fh.write(f"blackbox,{bb['pre']!r},{bb['black_post']!r}\n")
        for m, (a, b) in mt.items():
            fh.write(f"{m},{a!r},{b!r}\n")
    return {"blackbox": bb, "methods": {m: {"pre": a, "post": b} for m, (a, b) in mt.items()}}


def cmd_run(cfg, out) -> dict:
    res = experiment.run_experiment(cfg, out)
    return {"report": "report.json", "pre_ece": res.pre.ece, "post_ece": res.post.ece,
            "label_preservation": res.post.label_preservation}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "unlearn": cmd_unlearn,
    "eval-uq": cmd_eval_uq,
    "theory": cmd_theory,
    "transfer": cmd_transfer,
    "run": cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg, out = _load(args)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore" if args.command == "run" else "default")
            summary = COMMANDS[args.command](cfg, out)
    except (ForgetAttackError, ValueError, OSError, IndexError) as exc:
        print(f"forgetattack {args.command}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True, indent=2, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
