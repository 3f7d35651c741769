"""Train -> craft -> unlearn -> evaluate pipeline and its on-disk artifacts."""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import attack, conformal, data, metrics, ndcore, unlearn, uq
from .config import ExperimentConfig
from .metrics import Report

REPORT_SCHEMA = {
    "type": "object",
    "required": ["config_hash", "seeds", "pre", "post", "increments", "mask_path", "warnings", "timings"],
    "properties": {
        "config_hash": {"type": "string"},
        "seeds": {"type": "object", "additionalProperties": {"type": "integer"}},
        "pre": {"$ref": "#/definitions/report"},
        "post": {"$ref": "#/definitions/report"},
        "increments": {
            "type": "object",
            "required": ["ece", "ace", "brier"],
            "additionalProperties": {"type": ["number", "null"]},
        },
        "mask_path": {"type": ["string", "null"]},
        "warnings": {"type": "array", "items": {"type": "string"}},
        "timings": {"type": "object", "additionalProperties": {"type": "number"}},
    },
    "definitions": {
        "report": {
            "type": "object",
            "required": ["ece", "ace", "brier", "accuracy", "coverage", "avg_set_size", "label_preservation"],
            "properties": {
                k: {"type": ["number", "null"]}
                for k in ("ece", "ace", "brier", "accuracy", "coverage", "avg_set_size", "label_preservation")
            },
        }
    },
}


@dataclass
class Setup:
    """Everything fixed before the attack: data, trained estimator, and the
    calibrator / conformal predictor fitted on the holdout."""

    cfg: ExperimentConfig
    splits: data.Splits
    D: data.Dataset
    holdout: data.Dataset
    X_victims: np.ndarray
    y_victims: np.ndarray
    candidates: np.ndarray
    inits: tuple
    est: uq.Estimator
    calibrator: Optional[uq.CalibratorParams] = None
    conformal: Optional[conformal.ConformalPredictor] = None
    sisa: Optional[unlearn.ShardedModel] = None

    @property
    def pool_X(self) -> np.ndarray:
        return self.D.features

    def probs(self, est: uq.Estimator, X) -> np.ndarray:
        if self.calibrator is None:
            return uq.estimate(est, X)
        return uq.apply_calibrator(self.calibrator, uq.model_logits(est, X))


@dataclass
class RunResult:
    pre: Report
    post: Report
    mask: unlearn.ForgetMask
    victims: attack.VictimState
    est_post: Optional[uq.Estimator]
    probs_pre: np.ndarray
    probs_post: np.ndarray
    warnings: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    setup: Optional[Setup] = None

    @property
    def increments(self) -> dict:
        return metrics.increment_ratios(self.pre, self.post)


def effective_train_config(cfg: ExperimentConfig) -> ndcore.TrainConfig:
    if cfg.defense == "adversarial_training":
        return replace(cfg.train, adv_epsilon=0.1, adv_steps=5)
    return cfg.train


def train_estimator(cfg: ExperimentConfig, D: data.Dataset, init_seed: Optional[int] = None,
                    train_cfg: Optional[ndcore.TrainConfig] = None):
    """(estimator, initial parameters per member)."""
    init_seed = cfg.init_seed if init_seed is None else init_seed
    tc = train_cfg or effective_train_config(cfg)
    arch = (D.dim, *tc.hidden, D.class_count)
    count = cfg.uq.ensemble_size if cfg.uq.estimator == "ensemble" else 1
    inits, models = [], []
    for i in range(count):
        init = ndcore.init_params(arch, init_seed + 1000 * i, tc.dropout_rate)
        inits.append(init)
        models.append(ndcore.train(init_seed + 1000 * i, D, replace(tc, seed=tc.seed + i), init=init))
    est = uq.Estimator(cfg.uq.estimator, tuple(models), cfg.uq.mc_samples, cfg.unlearn.seed)
    return est, tuple(inits)


def prepare(cfg: ExperimentConfig) -> Setup:
    dc = cfg.data
    ds = data.gen_blobs(dc.n, dc.d, dc.classes, dc.spread, dc.seed)
    sp = data.split(ds, dc.fractions, dc.adversary_fraction, dc.victim_count, dc.seed)
    D = ds.subset(sp.train)
    holdout = ds.subset(sp.holdout)
    est, inits = train_estimator(cfg, D)
    setup = Setup(
        cfg, sp, D, holdout,
        ds.features[sp.victims], ds.labels[sp.victims],
        np.searchsorted(sp.train, sp.adversary),
        inits, est,
    )
    if cfg.uq.calibrator is not None:
        setup.calibrator = uq.fit_calibrator(cfg.uq.calibrator, uq.model_logits(est, holdout.features),
                                             holdout.labels)
    if cfg.unlearn.method == "sisa":
        ensure_sisa(setup)
    if cfg.uq.conformal is not None:
        u = cfg.uq
        setup.conformal = conformal.fit_conformal(u.conformal, target_probs(setup, None, holdout.features),
                                                  holdout.labels, u.alpha, u.k_reg, u.lambda_reg)
    return setup


def target_probs(setup: Setup, state, X) -> np.ndarray:
    """Probabilities of the evaluated model: the estimator (optionally
    calibrated) or, for SISA, the shard ensemble.  ``state`` is an estimator,
    a ShardedModel, or None for the pre-attack model."""
    if setup.cfg.unlearn.method == "sisa":
        return unlearn.sisa_predict(state or ensure_sisa(setup), X)
    return setup.probs(state or setup.est, X)


def ensure_sisa(setup: Setup) -> unlearn.ShardedModel:
    if setup.sisa is None:
        c = setup.cfg
        setup.sisa = unlearn.sisa_train(setup.D, c.unlearn.sisa_shards, c.unlearn.sisa_slices,
                                        effective_train_config(c), c.init_seed)
    return setup.sisa


def build_victims(setup: Setup, est: Optional[uq.Estimator] = None,
                  attack_cfg: Optional[attack.AttackConfig] = None) -> attack.VictimState:
    return attack.build_victims(est or setup.est, setup.X_victims, setup.holdout, setup.pool_X,
                                attack_cfg or setup.cfg.attack, setup.y_victims,
                                setup.splits.victims)


def craft_mask(setup: Setup, kind: Optional[str] = None, victims=None,
               attack_cfg: Optional[attack.AttackConfig] = None,
               basis: Optional[np.ndarray] = None) -> unlearn.ForgetMask:
    kind = kind or setup.cfg.mask
    ac = attack_cfg or setup.cfg.attack
    if kind == "none" or ac.budget == 0:
        return unlearn.ForgetMask(np.zeros(len(setup.candidates)), 0, setup.candidates)
    if kind == "random":
        return attack.baseline_mask("random", setup.est, setup.D, setup.candidates, ac)
    if victims is None:
        victims = build_victims(setup, attack_cfg=ac)
    if kind == "label_attack":
        return attack.baseline_mask("label_attack", setup.est, setup.D, setup.candidates, ac,
                                    victims, basis=basis)
    return attack.optimize_mask(setup.est, setup.D, setup.candidates, victims, ac, basis)


def apply_mask(setup: Setup, mask: unlearn.ForgetMask, method: Optional[str] = None):
    """Unlearn the mask's forget set from the target; returns an estimator or
    a ShardedModel for SISA."""
    method = method or setup.cfg.unlearn.method
    if method == "sisa":
        return unlearn.sisa_unlearn(ensure_sisa(setup), mask.forget_indices())
    if mask.forget_indices().size == 0:
        return setup.est
    hp = setup.cfg.unlearn.hp(setup.cfg.train)
    members = [
        unlearn.apply_unlearning(method, m, setup.D, mask, hp, init)
        for m, init in zip(setup.est.models, setup.inits)
    ]
    return setup.est.with_models(members)


def evaluate(setup: Setup, probs: np.ndarray, reference_pred=None) -> Report:
    return metrics.make_report(probs, setup.y_victims, reference_pred, setup.conformal, setup.cfg.uq.bins)


def run_pipeline(cfg: ExperimentConfig, setup: Optional[Setup] = None) -> RunResult:
    """The full experiment without touching the disk."""
    timings = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        t0 = time.perf_counter()
        setup = setup or prepare(cfg)
        timings["prepare"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        victims = build_victims(setup)
        mask = craft_mask(setup, victims=victims)
        timings["craft"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        pre_probs = target_probs(setup, None, setup.X_victims)
        state = apply_mask(setup, mask)
        post_probs = target_probs(setup, state, setup.X_victims)
        timings["unlearn"] = time.perf_counter() - t0
        pre = evaluate(setup, pre_probs)
        post = evaluate(setup, post_probs, pre_probs.argmax(axis=1))
    msgs = list(dict.fromkeys(str(w.message) for w in caught))
    est_post = state if isinstance(state, uq.Estimator) else None
    return RunResult(pre, post, mask, victims, est_post, pre_probs, post_probs, msgs, timings, setup)


def report_dict(cfg: ExperimentConfig, res: RunResult, mask_path: Optional[str]) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "seeds": cfg.seeds(),
        "pre": res.pre.to_dict(),
        "post": res.post.to_dict(),
        "increments": res.increments,
        "mask_path": mask_path,
        "warnings": res.warnings,
        "timings": {k: round(v, 6) for k, v in res.timings.items()},
    }


def write_reliability(path, rows_by_stage: dict) -> None:
    with open(path, "w") as fh:
        fh.write("stage,bin,lo,hi,count,accuracy,confidence\n")
        for stage, rows in rows_by_stage.items():
            for r in rows:
                fh.write(f"{stage},{r[0]},{r[1]!r},{r[2]!r},{r[3]},{r[4]!r},{r[5]!r}\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Run the pipeline and write checkpoints, the mask, ``report.json`` and
    ``reliability.csv`` under ``out_dir`` (default ``cfg.out_dir``)."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    res = run_pipeline(cfg)
    setup = res.setup
    for i, m in enumerate(setup.est.models):
        ndcore.save_model(m, out / f"model{i}.uulm")
    if res.est_post is not None:
        for i, m in enumerate(res.est_post.models):
            ndcore.save_model(m, out / f"unlearned{i}.uulm")
    if setup.sisa is not None:
        unlearn.save_sharded(setup.sisa, out / "sisa")
    if setup.calibrator is not None:
        uq.save_calibrator(setup.calibrator, out / "calibrator.bin")
    unlearn.write_mask(out / "mask.txt", res.mask)
    bins = cfg.uq.bins
    write_reliability(out / "reliability.csv", {
        "pre": metrics.reliability_table(res.probs_pre, setup.y_victims, bins),
        "post": metrics.reliability_table(res.probs_post, setup.y_victims, bins),
    })
    res.timings["total"] = time.perf_counter() - t_start
    rep = report_dict(cfg, res, "mask.txt")
    (out / "report.json").write_text(json.dumps(rep, sort_keys=True, indent=2) + "\n")
    return res


# -- transfer studies -----------------------------------------------------------

SURROGATE_WIDTHS = ((32, 32), (64, 64), (128, 128))
TRANSFER_METHODS = ("second_order", "ssd", "fisher", "unrolling", "sisa")


def _ece(setup: Setup, probs) -> float:
    return metrics.ece(probs, setup.y_victims, setup.cfg.uq.bins)


def blackbox_transfer(cfg: ExperimentConfig, widths=SURROGATE_WIDTHS) -> dict:
    """Craft on surrogates of different widths and seeds, apply to a target
    trained from a different seed, and compare with the white-box attack on
    that same target.  Returns pre/post ECE for both."""
    target_cfg = cfg.with_seed(cfg.init_seed + 100)
    target_cfg = replace(target_cfg, data=cfg.data)
    setup = prepare(target_cfg)
    pre = _ece(setup, setup.probs(setup.est, setup.X_victims))
    white = craft_mask(setup, "ours")
    white_post = _ece(setup, setup.probs(apply_mask(setup, white, "first_order"), setup.X_victims))
    surrogates = []
    for i, w in enumerate(widths):
        tc = replace(cfg.train, hidden=tuple(w), seed=cfg.train.seed + 10 + i)
        est, _ = train_estimator(cfg, setup.D, init_seed=cfg.init_seed + 10 + i, train_cfg=tc)
        surrogates.append(est)
    mask = attack.transfer_attack(surrogates, None, setup.D, setup.candidates, setup.X_victims,
                                  setup.holdout, setup.pool_X, cfg.attack, setup.y_victims)
    black_post = _ece(setup, setup.probs(apply_mask(setup, mask, "first_order"), setup.X_victims))
    return {"pre": pre, "white_post": white_post, "black_post": black_post}


def method_transfer(cfg: ExperimentConfig, methods=TRANSFER_METHODS,
                    setup: Optional[Setup] = None) -> dict:
    """Mask crafted under the attack's differentiable method, then unlearned
    with each listed method.  Returns {method: (pre_ece, post_ece)}."""
    setup = setup or prepare(cfg)
    mask = craft_mask(setup, "ours")
    out = {}
    for m in methods:
        sub = replace(cfg, unlearn=replace(cfg.unlearn, method=m))
        s = replace(setup, cfg=sub)
        pre = _ece(s, target_probs(s, None, s.X_victims))
        post = _ece(s, target_probs(s, apply_mask(s, mask, m), s.X_victims))
        setup.sisa = s.sisa
        out[m] = (pre, post)
    return out
