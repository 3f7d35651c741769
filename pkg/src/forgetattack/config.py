"""Experiment configuration: dataclasses plus a line-oriented text format.

Each non-blank line is ``section.key = value``; ``#`` starts a comment.
Values are Python literals (numbers, strings, tuples, None, True/False);
bare words are read as strings.
"""

from __future__ import annotations

import ast
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from .attack import AttackConfig
from .conformal import KINDS as CONFORMAL_KINDS
from .errors import ConfigError
from .ndcore import TrainConfig
from .theory import TheoryConfig
from .uq import CALIBRATORS, ESTIMATORS

MASK_KINDS = ("ours", "random", "label_attack", "none")
DEFENSES = ("none", "adversarial_training")
UNLEARN_METHODS = ("first_order", "second_order", "unrolling", "fisher", "ssd", "sisa")


@dataclass(frozen=True)
class DataConfig:
    n: int = 2000
    d: int = 16
    classes: int = 10
    spread: float = 3.0
    seed: int = 0
    train_fraction: float = 0.6
    holdout_fraction: float = 0.2
    adversary_fraction: float = 1.0
    victim_count: int = 20

    @property
    def fractions(self) -> dict:
        test = 1.0 - self.train_fraction - self.holdout_fraction
        return {"train": self.train_fraction, "holdout": self.holdout_fraction, "test": test}


@dataclass(frozen=True)
class UQConfig:
    estimator: str = "softmax"
    ensemble_size: int = 5
    mc_samples: int = 30
    calibrator: Optional[str] = None
    conformal: Optional[str] = "aps"
    alpha: float = 0.1
    k_reg: int = 2
    lambda_reg: float = 0.1
    bins: int = 15


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "first_order"
    tau: float = 0.01
    # second order: damping keeps H + damping I positive definite for ReLU nets
    damping: float = 0.1
    cg_iters: int = 100
    cg_tol: float = 1e-8
    second_order_tau: Optional[float] = None  # None -> 1 / |retained|
    # unrolling: None -> lr * epochs = tau / 10; gradients at the initial
    # parameters are roughly 10-20x larger than at the trained ones
    unroll_lr: Optional[float] = None
    unroll_epochs: Optional[int] = None
    noise_scale: float = 1e-3
    fisher_damping: float = 1e-3
    ssd_alpha: float = 10.0
    ssd_lambda: float = 1.0
    sisa_shards: int = 5
    sisa_slices: int = 2
    seed: int = 0

    def hp(self, train: Optional[TrainConfig] = None) -> dict:
        train = train or TrainConfig()
        epochs = train.epochs if self.unroll_epochs is None else self.unroll_epochs
        return {
            "tau": self.tau,
            "damping": self.damping,
            "cg_iters": self.cg_iters,
            "cg_tol": self.cg_tol,
            "second_order_tau": self.second_order_tau,
            "unroll_lr": self.tau / (10.0 * epochs) if self.unroll_lr is None else self.unroll_lr,
            "unroll_epochs": epochs,
            "noise_scale": self.noise_scale,
            "fisher_damping": self.fisher_damping,
            "seed": self.seed,
            "ssd_alpha": self.ssd_alpha,
            "ssd_lambda": self.ssd_lambda,
        }


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(hidden=(64, 64)))
    uq: UQConfig = field(default_factory=UQConfig)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(mode="ov_un", tau=0.01))
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    theory: TheoryConfig = field(default_factory=TheoryConfig)
    mask: str = "ours"
    defense: str = "none"
    init_seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        if self.mask not in MASK_KINDS:
            raise ConfigError(f"mask must be one of {MASK_KINDS}, got {self.mask!r}")
        if self.defense not in DEFENSES:
            raise ConfigError(f"defense must be one of {DEFENSES}, got {self.defense!r}")
        if self.unlearn.method not in UNLEARN_METHODS:
            raise ConfigError(f"unknown unlearning method {self.unlearn.method!r}")
        if self.uq.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.uq.estimator!r}")
        if self.uq.calibrator is not None and self.uq.calibrator not in CALIBRATORS:
            raise ConfigError(f"unknown calibrator {self.uq.calibrator!r}")
        if self.uq.conformal is not None and self.uq.conformal not in CONFORMAL_KINDS:
            raise ConfigError(f"unknown conformal score {self.uq.conformal!r}")
        if self.uq.estimator == "mc_dropout" and self.train.dropout_rate <= 0:
            raise ConfigError("mc_dropout needs train.dropout_rate > 0")
        if self.uq.estimator == "ensemble" and self.uq.ensemble_size < 2:
            raise ConfigError("ensemble needs uq.ensemble_size >= 2")
        for name in ("data", "train", "attack", "unlearn"):
            if getattr(getattr(self, name), "seed", None) is None:
                raise ConfigError(f"{name}.seed is missing")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Every seed in the config replaced by ``seed``."""
        return replace(
            self,
            data=replace(self.data, seed=seed),
            train=replace(self.train, seed=seed),
            attack=replace(self.attack, seed=seed),
            unlearn=replace(self.unlearn, seed=seed),
            theory=replace(self.theory, seed=seed),
            init_seed=seed,
        )

    def seeds(self) -> dict:
        return {
            "data": self.data.seed,
            "train": self.train.seed,
            "init": self.init_seed,
            "attack": self.attack.seed,
            "unlearn": self.unlearn.seed,
        }

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = asdict(v) if hasattr(v, "__dataclass_fields__") else v
        return out

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        text = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


SECTIONS = {
    "data": DataConfig,
    "train": TrainConfig,
    "uq": UQConfig,
    "attack": AttackConfig,
    "unlearn": UnlearnConfig,
    "theory": TheoryConfig,
}
TOP_LEVEL = ("mask", "defense", "init_seed", "out_dir", "seed")


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``section.key = value`` lines over the defaults.

    ``experiment.seed`` (or a bare ``seed``) applies to every seed at once,
    before any section-specific seed."""
    overrides: dict = {name: {} for name in SECTIONS}
    top: dict = {}
    base = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.rpartition(".")
        val = _literal(value)
        if section in ("", "experiment"):
            if name not in TOP_LEVEL:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            top[name] = val
            continue
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        known = {f.name for f in fields(SECTIONS[section])}
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        overrides[section][name] = val
    if "seed" in top:
        base = base.with_seed(int(top.pop("seed")))
    kw = {}
    for section, vals in overrides.items():
        try:
            kw[section] = replace(getattr(base, section), **vals) if vals else getattr(base, section)
        except TypeError as exc:
            raise ConfigError(f"section {section}: {exc}") from None
    return replace(base, **kw, **top)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: ExperimentConfig) -> str:
    """Inverse of ``parse_config`` for every field."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {getattr(obj, f.name)!r}")
    for name in ("mask", "defense", "init_seed", "out_dir"):
        lines.append(f"experiment.{name} = {getattr(cfg, name)!r}")
    return "\n".join(lines) + "\n"
