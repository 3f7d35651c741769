"""Top-label calibration metrics and the per-run Report bundle."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import EmptyInputError, ConfigError

DEFAULT_BINS = 15


def _conf_correct(probs, labels):
    P = np.atleast_2d(np.asarray(probs, dtype=float))
    y = np.asarray(labels, dtype=np.int64)
    if P.shape[0] == 0 or y.size == 0:
        raise EmptyInputError("metrics need at least one prediction")
    if P.shape[0] != y.size:
        raise ConfigError(f"{P.shape[0]} probability vectors but {y.size} labels")
    conf = P.max(axis=1)
    correct = (P.argmax(axis=1) == y).astype(float)
    return P, conf, correct


def _binned_gap(conf, correct, bin_idx, bins):
    n = conf.size
    cnt = np.bincount(bin_idx, minlength=bins)
    acc = np.bincount(bin_idx, weights=correct, minlength=bins)
    cs = np.bincount(bin_idx, weights=conf, minlength=bins)
    nz = cnt > 0
    return float(np.abs(acc[nz] - cs[nz]).sum() / n)


def ece_bins(conf, n_classes: int, bins: int, lo: Optional[float] = None) -> np.ndarray:
    """Equal-width bin index of each confidence over [lo, 1]; lo defaults to
    1/C, the smallest possible top-label probability."""
    lo = 1.0 / n_classes if lo is None else lo
    width = (1.0 - lo) / bins
    idx = np.floor((np.asarray(conf) - lo) / width).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def ece(probs, labels, bins: int = DEFAULT_BINS, lo: Optional[float] = None) -> float:
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    P, conf, correct = _conf_correct(probs, labels)
    return _binned_gap(conf, correct, ece_bins(conf, P.shape[1], bins, lo), bins)


def ace_bins(conf, bins: int) -> np.ndarray:
    """Equal-mass bins: edges at the k*n/bins order statistics, so identical
    confidences always share a bin."""
    s = np.sort(conf, kind="stable")
    n = s.size
    edges = s[[(k * n) // bins for k in range(1, bins)]]
    return np.searchsorted(edges, conf, side="right")


def ace(probs, labels, bins: int = DEFAULT_BINS) -> float:
    P, conf, correct = _conf_correct(probs, labels)
    if bins < 1 or conf.size < bins:
        raise ConfigError(f"ACE needs 1 <= bins <= n, got bins={bins}, n={conf.size}")
    return _binned_gap(conf, correct, ace_bins(conf, bins), bins)


def brier(probs, labels) -> float:
    P, _, _ = _conf_correct(probs, labels)
    onehot = np.zeros_like(P)
    onehot[np.arange(P.shape[0]), np.asarray(labels)] = 1.0
    return float(((P - onehot) ** 2).sum(axis=1).mean())


def label_preservation(before, after) -> float:
    a, b = np.asarray(before), np.asarray(after)
    if a.shape != b.shape:
        raise ConfigError("label vectors differ in length")
    if a.size == 0:
        return 1.0
    return float((a == b).mean())


def reliability_table(probs, labels, bins: int = DEFAULT_BINS):
    """Rows (bin, lo, hi, count, accuracy, confidence) for CSV export."""
    P, conf, correct = _conf_correct(probs, labels)
    lo = 1.0 / P.shape[1]
    idx = ece_bins(conf, P.shape[1], bins)
    width = (1.0 - lo) / bins
    rows = []
    for b in range(bins):
        m = idx == b
        k = int(m.sum())
        rows.append((b, lo + b * width, lo + (b + 1) * width, k,
                     float(correct[m].mean()) if k else float("nan"),
                     float(conf[m].mean()) if k else float("nan")))
    return rows


@dataclass(frozen=True)
class Report:
    ece: float
    ace: float
    brier: float
    accuracy: float
    coverage: float = float("nan")
    avg_set_size: float = float("nan")
    label_preservation: float = 1.0

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and np.isnan(v) else v)
                for k, v in asdict(self).items()}


def make_report(probs, labels, reference_pred=None, conformal=None,
                bins: int = DEFAULT_BINS) -> Report:
    P, _, correct = _conf_correct(probs, labels)
    cov = size = float("nan")
    if conformal is not None:
        from .conformal import avg_set_size, coverage

        cov = coverage(conformal, P, labels)
        size = avg_set_size(conformal, P)
    pres = 1.0
    if reference_pred is not None:
        pres = label_preservation(reference_pred, P.argmax(axis=1))
    return Report(
        ece=ece(P, labels, bins),
        ace=ace(P, labels, min(bins, P.shape[0])),
        brier=brier(P, labels),
        accuracy=float(correct.mean()),
        coverage=cov,
        avg_set_size=size,
        label_preservation=pres,
    )


def increment_ratios(pre: Report, post: Report) -> dict:
    """(post - pre) / pre per calibration metric; None when pre is zero."""
    out = {}
    for key in ("ece", "ace", "brier"):
        a, b = getattr(pre, key), getattr(post, key)
        out[key] = None if a == 0 else (b - a) / a
    return out
