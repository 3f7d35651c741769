"""Uncertainty estimators (softmax, deep ensemble, MC dropout) and post-hoc
calibrators (temperature scaling, ensemble TS, isotonic regression)."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ndcore
from .errors import ConfigError, DegenerateDataError, FormatError
from .ndcore import ModelParams, softmax

ESTIMATORS = ("softmax", "ensemble", "mc_dropout")
CALIBRATORS = ("ts", "ets", "ir")


@dataclass(frozen=True)
class Estimator:
    kind: str
    models: tuple
    mc_samples: int = 30
    mc_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if self.kind not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.kind!r}")
        if not self.models:
            raise ConfigError("estimator needs at least one model")
        if self.kind == "ensemble" and len(self.models) < 2:
            raise ConfigError("ensemble needs at least two members")
        if self.kind != "ensemble" and len(self.models) != 1:
            raise ConfigError(f"{self.kind} estimator takes exactly one model")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")

    @property
    def n_params(self) -> int:
        return sum(m.n_params for m in self.models)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([m.params for m in self.models])

    def with_flat_params(self, flat: np.ndarray) -> "Estimator":
        """Same estimator with member parameters taken from one concatenated vector."""
        out, pos = [], 0
        for m in self.models:
            out.append(m.with_params(flat[pos : pos + m.n_params]))
            pos += m.n_params
        return Estimator(self.kind, tuple(out), self.mc_samples, self.mc_seed)

    def with_models(self, models) -> "Estimator":
        return Estimator(self.kind, tuple(models), self.mc_samples, self.mc_seed)


def _passes(est: Estimator, n: int):
    """(member slot, model, masks) triples whose softmaxes are averaged."""
    if est.kind == "softmax":
        return [(0, est.models[0], None)]
    if est.kind == "ensemble":
        return [(i, m, None) for i, m in enumerate(est.models)]
    m = est.models[0]
    if m.dropout_rate == 0:
        return [(0, m, None)] * est.mc_samples
    return [
        (0, m, ndcore.dropout_masks(m, n, est.mc_seed + k)) for k in range(est.mc_samples)
    ]


def estimate(est: Estimator, x) -> np.ndarray:
    """Probability vectors, shape (C,) for one input or (n, C) for a batch."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != est.models[0].n_features:
        raise ndcore.ShapeError(f"input width {X.shape[1]} != {est.models[0].n_features}")
    passes = _passes(est, X.shape[0])
    total = 0.0
    for _, model, masks in passes:
        logits, _, _ = ndcore._forward_cache(model, X, masks)
        total = total + softmax(logits)
    probs = total / len(passes)
    return probs[0] if single else probs


def estimate_vjp(est: Estimator, X: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dprobs * estimate(est, X))`` with respect to the
    concatenated parameters of the estimator's members."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    passes = _passes(est, X.shape[0])
    scale = 1.0 / len(passes)
    grads = [np.zeros(m.n_params) for m in est.models]
    for slot, model, masks in passes:
        logits, acts, pres = ndcore._forward_cache(model, X, masks)
        p = softmax(logits)
        dp = dprobs * scale
        dz = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        g = ndcore._backward(model, acts, pres, dz, masks)
        grads[slot] += g
    return np.concatenate(grads)


def model_logits(est: Estimator, X) -> np.ndarray:
    """Log of the estimated probabilities; usable as calibrator input for any
    estimator kind (for plain softmax this equals the logits up to a shift)."""
    return np.log(np.clip(estimate(est, X), 1e-300, None))


# -- calibrators --------------------------------------------------------------


@dataclass(frozen=True)
class CalibratorParams:
    kind: str
    temperature: float = 1.0
    ets_weights: tuple = (1.0, 0.0, 0.0)
    ir_maps: tuple = ()

    def __post_init__(self):
        if self.kind not in CALIBRATORS:
            raise ConfigError(f"unknown calibrator {self.kind!r}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        w = np.asarray(self.ets_weights, dtype=float)
        if w.shape != (3,) or (w < -1e-12).any() or abs(w.sum() - 1) > 1e-9:
            raise ConfigError(f"ets_weights must lie on the 3-simplex, got {self.ets_weights}")


def _nll(probs, labels):
    return -np.mean(np.log(np.clip(probs[np.arange(len(labels)), labels], 1e-12, None)))


def golden_section(f, lo: float, hi: float, tol: float = 1e-6) -> float:
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_temperature(logits, labels, lo: float = 0.05, hi: float = 20.0) -> float:
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    return golden_section(lambda T: _nll(softmax(logits / T), labels), lo, hi)


def pav(y, w=None) -> np.ndarray:
    """Pool-adjacent-violators: the nondecreasing least-squares fit to ``y``."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    vals, wts, counts = [], [], []
    for yi, wi in zip(y, w):
        vals.append(yi)
        wts.append(wi)
        counts.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v2, w2, c2 = vals.pop(), wts.pop(), counts.pop()
            wsum = wts[-1] + w2
            vals[-1] = (vals[-1] * wts[-1] + v2 * w2) / wsum
            wts[-1] = wsum
            counts[-1] += c2
    return np.repeat(vals, counts)


def _fit_step_map(scores, targets):
    # tied scores are pooled up front so each breakpoint gets one value
    xs, inv, counts = np.unique(scores, return_inverse=True, return_counts=True)
    means = np.bincount(inv, weights=targets) / counts
    return xs, pav(means, counts)


def _apply_step_map(xs, ys, s):
    pos = np.searchsorted(xs, s, side="right") - 1
    return ys[np.clip(pos, 0, len(ys) - 1)]


def fit_calibrator(kind: str, logits_val, labels_val, grid_step: float = 0.01) -> CalibratorParams:
    logits = np.asarray(logits_val, dtype=float)
    labels = np.asarray(labels_val, dtype=np.int64)
    if len(labels) == 0:
        raise DegenerateDataError("empty validation set")
    if len(np.unique(labels)) < 2:
        raise DegenerateDataError("validation set contains a single class")
    if kind == "ts":
        return CalibratorParams("ts", temperature=fit_temperature(logits, labels))
    if kind == "ets":
        T = fit_temperature(logits, labels)
        C = logits.shape[1]
        rows = np.arange(len(labels))
        a = softmax(logits / T)[rows, labels]
        b = softmax(logits)[rows, labels]
        k = int(round(1.0 / grid_step))
        grid = np.array([(i, j, k - i - j) for i in range(k + 1) for j in range(k + 1 - i)]) / k
        mix = grid[:, :1] * a + grid[:, 1:2] * b + grid[:, 2:3] / C
        nll = -np.log(np.clip(mix, 1e-12, None)).mean(axis=1)
        w = grid[int(np.argmin(nll))]
        return CalibratorParams("ets", temperature=T, ets_weights=tuple(float(v) for v in w))
    if kind == "ir":
        probs = softmax(logits)
        maps = []
        for c in range(probs.shape[1]):
            xs, ys = _fit_step_map(probs[:, c], (labels == c).astype(float))
            maps.append((xs, ys))
        return CalibratorParams("ir", ir_maps=tuple(maps))
    raise ConfigError(f"unknown calibrator {kind!r}")


def apply_calibrator(cal: CalibratorParams, logits_or_probs, inputs: str = "logits") -> np.ndarray:
    """Calibrated probabilities. ``inputs='probs'`` treats the argument as
    probability vectors (logs are taken for TS/ETS)."""
    z = np.asarray(logits_or_probs, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if inputs == "probs":
        probs_raw = z
        z = np.log(np.clip(z, 1e-300, None))
    else:
        probs_raw = softmax(z)
    C = z.shape[1]
    if cal.kind == "ts":
        out = softmax(z / cal.temperature)
    elif cal.kind == "ets":
        w1, w2, w3 = cal.ets_weights
        out = w1 * softmax(z / cal.temperature) + w2 * probs_raw + w3 / C
    else:
        if len(cal.ir_maps) != C:
            raise ConfigError(f"calibrator fitted for {len(cal.ir_maps)} classes, got {C}")
        out = np.column_stack(
            [_apply_step_map(xs, ys, probs_raw[:, c]) for c, (xs, ys) in enumerate(cal.ir_maps)]
        )
        s = out.sum(axis=1, keepdims=True)
        out = np.where(s > 0, out / np.where(s > 0, s, 1.0), 1.0 / C)
    return out[0] if single else out


# calibrator file: "UUCAL" | u8 kind | payload
#   ts:  f64 T
#   ets: f64 T, f64 w1..w3
#   ir:  u32 C, then per class u32 m, f64 breakpoints[m], f64 values[m]


def save_calibrator(cal: CalibratorParams, path) -> None:
    buf = bytearray(b"UUCAL")
    buf += struct.pack("<B", CALIBRATORS.index(cal.kind))
    if cal.kind in ("ts", "ets"):
        buf += struct.pack("<d", cal.temperature)
    if cal.kind == "ets":
        buf += struct.pack("<3d", *cal.ets_weights)
    if cal.kind == "ir":
        buf += struct.pack("<I", len(cal.ir_maps))
        for xs, ys in cal.ir_maps:
            buf += struct.pack("<I", len(xs))
            buf += np.asarray(xs, "<f8").tobytes() + np.asarray(ys, "<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_calibrator(path) -> CalibratorParams:
    raw = Path(path).read_bytes()
    if raw[:5] != b"UUCAL":
        raise FormatError("bad calibrator magic", 0)
    if len(raw) < 6 or raw[5] >= len(CALIBRATORS):
        raise FormatError("bad calibrator kind", 5)
    kind = CALIBRATORS[raw[5]]
    pos = 6
    try:
        if kind == "ts":
            (T,) = struct.unpack_from("<d", raw, pos)
            return CalibratorParams("ts", temperature=T)
        if kind == "ets":
            T, w1, w2, w3 = struct.unpack_from("<4d", raw, pos)
            return CalibratorParams("ets", temperature=T, ets_weights=(w1, w2, w3))
        (C,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        maps = []
        for _ in range(C):
            (m,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            xs = np.frombuffer(raw, "<f8", m, pos).copy()
            ys = np.frombuffer(raw, "<f8", m, pos + 8 * m).copy()
            pos += 16 * m
            maps.append((xs, ys))
        return CalibratorParams("ir", ir_maps=tuple(maps))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated calibrator payload: {exc}", pos) from exc
