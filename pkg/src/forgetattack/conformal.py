"""Split conformal prediction with HPS, APS and RAPS nonconformity scores.

APS and RAPS are the deterministic (non-randomized) variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationSizeError, ConfigError

KINDS = ("hps", "aps", "raps")


@dataclass(frozen=True)
class ConformalPredictor:
    kind: str
    qhat: float
    alpha: float = 0.1
    k_reg: int = 2
    lambda_reg: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown conformal score {self.kind!r}")
        if not math.isfinite(self.qhat):
            raise ConfigError("qhat must be finite")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.k_reg < 0 or self.lambda_reg < 0:
            raise ConfigError("k_reg and lambda_reg must be non-negative")


def all_scores(kind: str, probs, k_reg: int = 2, lambda_reg: float = 0.1) -> np.ndarray:
    """Score of every candidate label, shape (n, C)."""
    P = np.atleast_2d(np.asarray(probs, dtype=float))
    if kind == "hps":
        return 1.0 - P
    if kind not in KINDS:
        raise ConfigError(f"unknown conformal score {kind!r}")
    n, C = P.shape
    order = np.argsort(-P, axis=1, kind="stable")
    cum = np.cumsum(np.take_along_axis(P, order, axis=1), axis=1)
    scores = np.empty_like(P)
    np.put_along_axis(scores, order, cum, axis=1)
    if kind == "raps":
        rank = np.empty((n, C), dtype=np.int64)
        np.put_along_axis(rank, order, np.broadcast_to(np.arange(1, C + 1), (n, C)), axis=1)
        scores = scores + lambda_reg * np.maximum(0, rank - k_reg)
    return scores


def nonconformity_score(kind: str, p, label: int, k_reg: int = 2, lambda_reg: float = 0.1) -> float:
    p = np.asarray(p, dtype=float)
    if not 0 <= label < p.shape[-1]:
        raise IndexError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(all_scores(kind, p, k_reg, lambda_reg)[0, label])


def conformal_calibrate(scores, alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th smallest calibration score."""
    s = np.sort(np.asarray(scores, dtype=float))
    n = s.size
    k = math.ceil((n + 1) * (1.0 - alpha) - 1e-9)
    if n == 0 or k > n:
        raise CalibrationSizeError(
            f"{n} calibration scores are too few for alpha={alpha} (need rank {k})"
        )
    return float(s[max(k, 1) - 1])


def fit_conformal(kind: str, probs_cal, labels_cal, alpha: float = 0.1,
                  k_reg: int = 2, lambda_reg: float = 0.1) -> ConformalPredictor:
    P = np.atleast_2d(np.asarray(probs_cal, dtype=float))
    y = np.asarray(labels_cal, dtype=np.int64)
    scores = all_scores(kind, P, k_reg, lambda_reg)[np.arange(len(y)), y]
    return ConformalPredictor(kind, conformal_calibrate(scores, alpha), alpha, k_reg, lambda_reg)


def predict_set(cp: ConformalPredictor, p) -> np.ndarray:
    """Boolean membership; shape (C,) for one vector or (n, C) for a batch."""
    p = np.asarray(p, dtype=float)
    member = all_scores(cp.kind, p, cp.k_reg, cp.lambda_reg) <= cp.qhat
    return member[0] if p.ndim == 1 else member


def coverage(cp: ConformalPredictor, probs, labels) -> float:
    m = predict_set(cp, np.atleast_2d(probs))
    return float(m[np.arange(len(labels)), np.asarray(labels)].mean())


def avg_set_size(cp: ConformalPredictor, probs) -> float:
    return float(predict_set(cp, np.atleast_2d(probs)).sum(axis=1).mean())
