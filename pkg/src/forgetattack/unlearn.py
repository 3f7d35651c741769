"""Unlearning algorithms theta_u = U(theta_star, D, D_u) and the linearised
model update used when crafting forget masks."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import ndcore
from .data import Dataset
from .errors import ConfigError
from .ndcore import ModelParams, TrainConfig, softmax


class UnlearnWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ForgetMask:
    """Weights over the adversary's candidate points (``candidates`` are their
    indices into the training set)."""

    weights: np.ndarray
    budget: int
    candidates: np.ndarray
    objective: float = float("nan")
    degenerate: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        c = np.asarray(self.candidates, dtype=np.int64).ravel()
        if w.shape != c.shape:
            raise ConfigError(f"{w.size} weights for {c.size} candidates")
        if w.size and (w.min() < 0 or w.max() > 1):
            raise ConfigError("mask weights must lie in [0, 1]")
        if self.budget < 0:
            raise ConfigError("budget must be non-negative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "candidates", c)

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.weights == 0) | (self.weights == 1)))

    def rounded(self) -> "ForgetMask":
        """Top-``budget`` weights set to 1 (ties go to the lower index)."""
        k = min(self.budget, self.weights.size)
        order = np.argsort(-self.weights, kind="stable")
        w = np.zeros_like(self.weights)
        w[order[:k]] = 1.0
        return replace(self, weights=w)

    def forget_indices(self) -> np.ndarray:
        if not self.is_binary:
            raise ConfigError("mask must be rounded before unlearning")
        return np.sort(self.candidates[self.weights == 1])

    @classmethod
    def from_indices(cls, candidates, chosen) -> "ForgetMask":
        candidates = np.asarray(candidates, dtype=np.int64)
        w = np.isin(candidates, chosen).astype(float)
        return cls(w, int(w.sum()), candidates)


def write_mask(path, mask: ForgetMask) -> None:
    """One line per candidate: ``train_index weight bit``."""
    bits = mask.rounded().weights if not mask.is_binary else mask.weights
    lines = [f"# budget={mask.budget} objective={mask.objective!r} degenerate={int(mask.degenerate)}"]
    lines += [f"{c} {w!r} {int(b)}" for c, w, b in zip(mask.candidates, mask.weights, bits)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mask(path) -> ForgetMask:
    """Reads a mask file back as the rounded (binary) mask."""
    cands, bits = [], []
    budget = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if tok.startswith("budget="):
                    budget = int(tok.split("=", 1)[1])
            continue
        c, _, b = line.split()
        cands.append(int(c))
        bits.append(float(b))
    w = np.asarray(bits)
    return ForgetMask(w, int(w.sum()) if budget is None else budget, np.asarray(cands))


def _retained(D: Dataset, forget_idx):
    keep = np.setdiff1d(np.arange(len(D)), forget_idx)
    return D.subset(keep)


def forget_grad_sum(theta: ModelParams, D: Dataset, forget_idx) -> np.ndarray:
    forget_idx = np.asarray(forget_idx, dtype=np.int64)
    if forget_idx.size == 0:
        return np.zeros(theta.n_params)
    return ndcore.per_sample_grads(theta, D.subset(forget_idx)).sum(axis=0)


def unlearn_first_order(theta_star: ModelParams, D: Dataset, mask: ForgetMask,
                        tau: float) -> ModelParams:
    """One gradient-ascent step on the forgotten points."""
    idx = mask.forget_indices()
    if idx.size == 0 or tau == 0:
        return theta_star
    return theta_star.with_params(theta_star.params + tau * forget_grad_sum(theta_star, D, idx))


def conjugate_gradient(matvec, b, x0=None, max_iter: int = 100, tol: float = 1e-8):
    """Solve A x = b for symmetric positive-definite A.

    Returns (best_x, residual_norm, converged)."""
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - matvec(x) if x0 is not None else b.copy()
    p = r.copy()
    rs = r @ r
    best, best_res = x.copy(), np.sqrt(rs)
    if best_res < tol:
        return x, best_res, True
    for _ in range(max_iter):
        Ap = matvec(p)
        pAp = p @ Ap
        if pAp <= 0:
            break
        alpha = rs / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = r @ r
        res = np.sqrt(rs_new)
        if res < best_res:
            best, best_res = x.copy(), res
        if res < tol:
            return x, res, True
        p = r + (rs_new / rs) * p
        rs = rs_new
    return best, best_res, False


def unlearn_second_order(theta_star: ModelParams, D: Dataset, mask: ForgetMask,
                         damping: float = 1e-3, cg_iters: int = 100,
                         cg_tol: float = 1e-8, tau: Optional[float] = 1.0) -> ModelParams:
    """Influence-style Newton step: theta + tau * (H_r + damping I)^-1 sum_u grad.

    H_r is the Hessian of the mean loss on the retained data, so
    tau = None (meaning 1 / |retained|) gives the influence-function removal."""
    idx = mask.forget_indices()
    if idx.size == 0:
        return theta_star
    kept = _retained(D, idx)
    if len(kept) == 0:
        raise ConfigError("second-order unlearning needs a nonempty retained set")
    g = forget_grad_sum(theta_star, D, idx)

    def matvec(v):
        return ndcore.hvp(theta_star, kept, v) + damping * v

    x, res, ok = conjugate_gradient(matvec, g, max_iter=cg_iters, tol=cg_tol)
    if not ok:
        warnings.warn(
            f"second-order unlearning: CG stopped at residual {res:.3g} after {cg_iters} iterations",
            UnlearnWarning,
            stacklevel=2,
        )
    tau = 1.0 / len(kept) if tau is None else tau
    return theta_star.with_params(theta_star.params + tau * x)


def unlearn_unrolling(theta_star: ModelParams, theta_init: ModelParams, D: Dataset,
                      mask: ForgetMask, lr: float, epochs: int) -> ModelParams:
    """First-order unrolled-SGD correction using gradients at the recorded init."""
    idx = mask.forget_indices()
    if idx.size == 0 or lr == 0:
        return theta_star
    g0 = forget_grad_sum(theta_init, D, idx)
    return theta_star.with_params(theta_star.params + lr * epochs * g0)


def diag_fisher(theta: ModelParams, ds: Dataset, chunk: int = 512) -> np.ndarray:
    """Mean of squared per-sample cross-entropy gradients."""
    total = np.zeros(theta.n_params)
    for s in range(0, len(ds), chunk):
        G = ndcore.per_sample_grads(theta, ds.subset(np.arange(s, min(s + chunk, len(ds)))))
        total += (G * G).sum(axis=0)
    return total / len(ds)


def unlearn_fisher(theta_star: ModelParams, D: Dataset, mask: ForgetMask,
                   noise_scale: float = 1e-3, damping: float = 1e-3,
                   seed: int = 0) -> ModelParams:
    """Fisher forgetting: Gaussian noise with variance noise_scale^2 / (F + damping)."""
    idx = mask.forget_indices()
    if idx.size == 0 or noise_scale == 0:
        return theta_star
    kept = _retained(D, idx)
    F = diag_fisher(theta_star, kept)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(theta_star.n_params) * (noise_scale / np.sqrt(F + damping))
    return theta_star.with_params(theta_star.params + eps)


def ssd_factors(F_forget: np.ndarray, F_full: np.ndarray, alpha: float, lambda_s: float) -> np.ndarray:
    """Multiplicative dampening per parameter (1 where not selected)."""
    factors = np.ones_like(F_full)
    if np.isinf(alpha):
        return factors
    sel = F_forget > alpha * F_full
    factors[sel] = np.minimum(lambda_s * F_full[sel] / F_forget[sel], 1.0)
    return factors


def unlearn_ssd(theta_star: ModelParams, D: Dataset, mask: ForgetMask,
                alpha: float = 10.0, lambda_s: float = 1.0) -> ModelParams:
    """Selective synaptic dampening."""
    idx = mask.forget_indices()
    if idx.size == 0:
        return theta_star
    F_f = diag_fisher(theta_star, D.subset(idx))
    F_D = diag_fisher(theta_star, D)
    return theta_star.with_params(theta_star.params * ssd_factors(F_f, F_D, alpha, lambda_s))


# -- SISA ---------------------------------------------------------------------


@dataclass
class ShardedModel:
    """``checkpoints[s][j]`` is shard s after training on slices 0..j."""

    data: Dataset
    shards: int
    slices: int
    cfg: TrainConfig
    init_seed: int
    assignment: np.ndarray  # (n, 2) -> (shard, slice)
    removed: np.ndarray
    checkpoints: list = field(default_factory=list)

    @property
    def models(self) -> list:
        return [chain[-1] for chain in self.checkpoints]


def sisa_assign(n: int, shards: int, slices: int, seed: int) -> np.ndarray:
    out = np.empty((n, 2), dtype=np.int64)
    for i in range(n):
        h = int.from_bytes(hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8).digest(), "little")
        out[i] = (h % shards, (h // shards) % slices)
    return out


def _shard_model(sm: ShardedModel, s: int, start_slice: int, prev: Optional[ModelParams]) -> list:
    """Train shard ``s`` from slice ``start_slice`` onward; returns the new checkpoints."""
    X, y = sm.data.features, sm.data.labels
    live = np.ones(len(y), dtype=bool)
    live[sm.removed] = False
    arch = (X.shape[1], *sm.cfg.hidden, sm.data.class_count)
    model = prev if prev is not None else ndcore.init_params(arch, sm.init_seed + s, sm.cfg.dropout_rate)
    out = []
    for j in range(start_slice, sm.slices):
        idx = np.flatnonzero(live & (sm.assignment[:, 0] == s) & (sm.assignment[:, 1] <= j))
        if idx.size:
            rng = np.random.default_rng([sm.cfg.seed, s, j])
            model = ndcore.sgd_epochs(model, X[idx], y[idx], sm.cfg, rng)
        out.append(model)
    return out


def sisa_train(D: Dataset, S: int = 5, R: int = 2, cfg: TrainConfig = TrainConfig(),
               init_seed: int = 0) -> ShardedModel:
    if S < 1 or R < 1 or S * R > len(D):
        raise ConfigError(f"need 1 <= S*R <= n, got S={S}, R={R}, n={len(D)}")
    sm = ShardedModel(D, S, R, cfg, init_seed, sisa_assign(len(D), S, R, init_seed),
                      np.zeros(0, dtype=np.int64))
    sm.checkpoints = [_shard_model(sm, s, 0, None) for s in range(S)]
    return sm


def sisa_unlearn(sm: ShardedModel, forget_idx) -> ShardedModel:
    """Exact unlearning: retrain each affected shard from the last checkpoint
    that never saw a forgotten point."""
    forget_idx = np.unique(np.asarray(forget_idx, dtype=np.int64))
    if forget_idx.size and (forget_idx.min() < 0 or forget_idx.max() >= len(sm.data)):
        raise IndexError("forget index outside the training set")
    new = np.setdiff1d(forget_idx, sm.removed)
    out = ShardedModel(sm.data, sm.shards, sm.slices, sm.cfg, sm.init_seed, sm.assignment,
                       np.union1d(sm.removed, new), [list(c) for c in sm.checkpoints])
    for s in range(sm.shards):
        hit = new[sm.assignment[new, 0] == s]
        if hit.size == 0:
            continue
        j0 = int(sm.assignment[hit, 1].min())
        prev = out.checkpoints[s][j0 - 1] if j0 > 0 else None
        out.checkpoints[s] = out.checkpoints[s][:j0] + _shard_model(out, s, j0, prev)
    return out


def sisa_predict(sm: ShardedModel, x) -> np.ndarray:
    return np.mean([softmax(ndcore.forward(m, x)) for m in sm.models], axis=0)


def save_sharded(sm: ShardedModel, directory) -> None:
    """``shard{i}/slice{j}.uulm`` plus ``manifest.json``."""
    root = Path(directory)
    for s, chain in enumerate(sm.checkpoints):
        (root / f"shard{s}").mkdir(parents=True, exist_ok=True)
        for j, m in enumerate(chain):
            ndcore.save_model(m, root / f"shard{s}" / f"slice{j}.uulm")
    manifest = {
        "shards": sm.shards,
        "slices": sm.slices,
        "init_seed": sm.init_seed,
        "assignment": sm.assignment.tolist(),
        "removed": sm.removed.tolist(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))


# -- linearised update for mask crafting ---------------------------------------

DIFFERENTIABLE = ("first_order", "second_order")


def update_basis(theta_star: ModelParams, method: str, D: Dataset, candidates,
                 damping: float = 1e-3, cg_iters: int = 100, cg_tol: float = 1e-8) -> np.ndarray:
    """(P, T) matrix B with model update delta(w) = tau * B @ w.

    first_order: columns are per-candidate loss gradients at theta_star.
    second_order: columns are (H + damping I)^-1 applied to those gradients,
    with H the Hessian of the mean loss over all of D."""
    if method not in DIFFERENTIABLE:
        raise ConfigError(
            f"unlearning method {method!r} is not differentiable; craft with "
            f"{DIFFERENTIABLE} and evaluate it in transfer mode"
        )
    G = ndcore.per_sample_grads(theta_star, D.subset(candidates)).T
    if method == "first_order":
        return G

    def matvec(v):
        return ndcore.hvp(theta_star, D, v) + damping * v

    cols = [conjugate_gradient(matvec, G[:, t], max_iter=cg_iters, tol=cg_tol)[0]
            for t in range(G.shape[1])]
    return np.column_stack(cols)


def model_update_psi(theta_star: ModelParams, method: str, D: Dataset, mask: ForgetMask,
                     tau: float, basis: Optional[np.ndarray] = None) -> np.ndarray:
    """Parameter delta induced by continuous weights; linear in ``mask.weights``."""
    if basis is None:
        basis = update_basis(theta_star, method, D, mask.candidates)
    elif method not in DIFFERENTIABLE:
        raise ConfigError(f"unlearning method {method!r} is not differentiable")
    return tau * (basis @ mask.weights)


def apply_unlearning(method: str, theta_star: ModelParams, D: Dataset, mask: ForgetMask,
                     hp: Optional[dict] = None, theta_init: Optional[ModelParams] = None) -> ModelParams:
    """Dispatch on the method tag (SISA has its own entry points)."""
    hp = dict(hp or {})
    if method == "first_order":
        return unlearn_first_order(theta_star, D, mask, hp.get("tau", 0.02))
    if method == "second_order":
        return unlearn_second_order(theta_star, D, mask, hp.get("damping", 1e-3),
                                    hp.get("cg_iters", 100), hp.get("cg_tol", 1e-8),
                                    hp.get("second_order_tau", 1.0))
    if method == "unrolling":
        if theta_init is None:
            raise ConfigError("unrolling needs the recorded initialisation")
        return unlearn_unrolling(theta_star, theta_init, D, mask,
                                 hp.get("unroll_lr", 1e-3), hp.get("unroll_epochs", 60))
    if method == "fisher":
        return unlearn_fisher(theta_star, D, mask, hp.get("noise_scale", 1e-3),
                              hp.get("fisher_damping", 1e-3), hp.get("seed", 0))
    if method == "ssd":
        return unlearn_ssd(theta_star, D, mask, hp.get("ssd_alpha", 10.0), hp.get("ssd_lambda", 1.0))
    raise ConfigError(f"unknown unlearning method {method!r}")
