"""Crafting malicious forget requests that shift victims' predictive
uncertainty while keeping their predicted labels.

The attacker picks which of its own training points to delete.  Deleting a
weighted set induces (to first order) the parameter update
``delta(w) = tau * B @ w`` where the columns of ``B`` come from the
unlearning method.  The mask is chosen so that ``delta`` points along the
descent direction of the attack objective

    loss = hinge(victim margins) + lam * sum_v KL(E(x_v) || mean E(reference set of v))

measured by cosine similarity, after relaxing the weights to [0, 1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import ndcore, uq
from .data import Dataset
from .errors import ConfigError
from .ndcore import ModelParams
from .unlearn import ForgetMask, update_basis
from .uq import Estimator

MODES = ("under", "over", "ov_un")
KL_FLOOR = 1e-12


class AttackWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "under"
    lam: float = 1.0
    k_neighbors: int = 10
    xi_percentile: float = 75.0
    margin_target: float = 0.9
    budget: int = 50
    restarts: int = 5
    ascent_steps: int = 200
    ascent_lr: float = 0.1
    tau: float = 0.02
    unlearn_method: str = "first_order"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown attack mode {self.mode!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.k_neighbors < 1:
            raise ConfigError("k_neighbors must be >= 1")
        if not 0 <= self.xi_percentile < 100:
            raise ConfigError("xi_percentile must lie in [0, 100)")
        if not 0 < self.margin_target <= 1:
            raise ConfigError("margin_target must lie in (0, 1]")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.budget < 0:
            raise ConfigError("budget must be non-negative")


@dataclass(frozen=True)
class VictimState:
    """Frozen victim predictions and their per-victim reference sets.

    ``modes`` holds +1 for an underconfidence target and -1 for overconfidence.
    ``references[v]`` indexes rows of ``holdout``.
    """

    X: np.ndarray
    yhat: np.ndarray
    modes: np.ndarray
    references: tuple
    holdout: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.yhat)


# -- proximity -----------------------------------------------------------------


def knn_mean_distance(H: np.ndarray, pool_H: np.ndarray, K: int) -> np.ndarray:
    if K < 1:
        raise ConfigError("K must be >= 1")
    if pool_H.shape[0] < K:
        raise ConfigError(f"pool of {pool_H.shape[0]} samples is smaller than K={K}")
    sq = (H * H).sum(1)[:, None] + (pool_H * pool_H).sum(1)[None, :] - 2.0 * H @ pool_H.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    nearest = np.sort(dist, axis=1)[:, :K]
    return nearest.mean(axis=1)


def proximity_scores(model: ModelParams, X, pool_X, K: int) -> np.ndarray:
    """exp(-mean hidden-space distance to the K nearest pool points), batched."""
    H = ndcore.hidden_rep(model, np.atleast_2d(X))
    P = ndcore.hidden_rep(model, np.atleast_2d(pool_X))
    return np.exp(-knn_mean_distance(H, P, K))


def proximity(model: ModelParams, x, pool: Dataset, K: int) -> float:
    return float(proximity_scores(model, np.atleast_2d(x), pool.features, K)[0])


def select_by_percentile(scores: np.ndarray, xi_percentile: float, high: bool = True) -> np.ndarray:
    """Positions with score >= the xi-th percentile (``high``) or <= the
    (100 - xi)-th percentile otherwise."""
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64)
    if high:
        sel = np.flatnonzero(scores >= np.percentile(scores, xi_percentile))
        fallback = int(np.argmax(scores))
    else:
        sel = np.flatnonzero(scores <= np.percentile(scores, 100.0 - xi_percentile))
        fallback = int(np.argmin(scores))
    if sel.size == 0:
        warnings.warn("empty proximity set; using the single best-ranked sample", AttackWarning)
        sel = np.array([fallback])
    return sel


def high_proximity_set(holdout_pred: np.ndarray, holdout_prox: np.ndarray, label: int,
                       xi_percentile: float, mode: int | str = "under") -> np.ndarray:
    """Holdout indices predicted as ``label`` whose proximity is in the top
    (under) or bottom (over) tail."""
    same = np.flatnonzero(holdout_pred == label)
    if same.size == 0:
        raise ConfigError(f"holdout has no sample predicted as class {label}")
    high = mode in ("under", 1)
    return same[select_by_percentile(holdout_prox[same], xi_percentile, high)]


def build_victims(est: Estimator, X_victims, holdout: Dataset, pool_X, cfg: AttackConfig,
                  y_true=None, indices=None) -> VictimState:
    """Freeze predicted labels under the current estimator, assign modes, and
    collect each victim's reference set from the holdout."""
    Xv = np.atleast_2d(np.asarray(X_victims, dtype=float))
    yhat = uq.estimate(est, Xv).argmax(axis=1)
    if cfg.mode == "under":
        modes = np.ones(len(yhat), dtype=np.int64)
    elif cfg.mode == "over":
        modes = -np.ones(len(yhat), dtype=np.int64)
    else:
        if y_true is None:
            raise ConfigError("ov_un mode needs the victims' true labels")
        modes = np.where(yhat == np.asarray(y_true), 1, -1)
    hold_pred = uq.estimate(est, holdout.features).argmax(axis=1)
    hold_prox = proximity_scores(est.models[0], holdout.features, pool_X, cfg.k_neighbors)
    refs = tuple(
        high_proximity_set(hold_pred, hold_prox, int(c), cfg.xi_percentile, int(m))
        for c, m in zip(yhat, modes)
    )
    idx = np.arange(len(yhat)) if indices is None else np.asarray(indices)
    return VictimState(Xv, yhat, modes, refs, holdout.features, idx)


# -- loss terms on probability vectors ------------------------------------------


def margins(P: np.ndarray, yhat: np.ndarray):
    """(top-minus-runner-up margin, runner-up index) per row."""
    rows = np.arange(len(yhat))
    other = P.copy()
    other[rows, yhat] = -np.inf
    runner = other.argmax(axis=1)
    return P[rows, yhat] - P[rows, runner], runner


def hinge_terms(P, yhat, modes, margin_target: float = 0.9):
    """Per-victim hinge and its gradient w.r.t. P.

    mode +1: max(margin, 0); mode -1: max(margin_target - margin, 0)."""
    P = np.atleast_2d(P)
    yhat = np.asarray(yhat)
    modes = np.asarray(modes)
    rows = np.arange(len(yhat))
    m, runner = margins(P, yhat)
    raw = np.where(modes > 0, m, margin_target - m)
    active = raw > 0
    terms = np.where(active, raw, 0.0)
    dP = np.zeros_like(P)
    sgn = np.where(active, np.where(modes > 0, 1.0, -1.0), 0.0)
    dP[rows, yhat] += sgn
    dP[rows, runner] -= sgn
    return terms, dP


def attack_loss(P, yhat, mode="under", margin_target: float = 0.9) -> float:
    """Sum of victim hinge terms for probability rows ``P``."""
    P = np.atleast_2d(P)
    modes = _mode_vector(mode, len(P))
    return float(hinge_terms(P, yhat, modes, margin_target)[0].sum())


def _mode_vector(mode, n):
    if isinstance(mode, str):
        if mode not in ("under", "over"):
            raise ConfigError("pass a per-victim mode vector for ov_un")
        return np.full(n, 1 if mode == "under" else -1)
    return np.asarray(mode)


def kl_terms(Pv: np.ndarray, ref_probs: Sequence[np.ndarray]):
    """KL(p_v || mean of refs) per victim, with grads for p_v and each ref row."""
    terms = np.empty(len(Pv))
    dPv = np.empty_like(Pv)
    dRefs = []
    for v, (p, R) in enumerate(zip(Pv, ref_probs)):
        q = R.mean(axis=0)
        pf = np.maximum(p, KL_FLOOR)
        qf = np.maximum(q, KL_FLOOR)
        terms[v] = float((pf * (np.log(pf) - np.log(qf))).sum())
        dPv[v] = np.where(p > KL_FLOOR, np.log(pf) - np.log(qf) + 1.0, 0.0)
        dq = np.where(q > KL_FLOOR, -pf / qf, 0.0)
        dRefs.append(np.broadcast_to(dq / len(R), R.shape))
    return terms, dPv, dRefs


def kl_divergence(p, q) -> float:
    return float(kl_terms(np.atleast_2d(p), [np.atleast_2d(q)])[0][0])


def regularizer_kl(est: Estimator, victims: VictimState) -> float:
    Pv = uq.estimate(est, victims.X)
    refs = [uq.estimate(est, victims.holdout[r]) for r in victims.references]
    return float(kl_terms(Pv, refs)[0].sum())


def _stacked(victims: VictimState):
    """Victim rows followed by every reference row, plus the slices of each ref."""
    blocks = [victims.X]
    spans = []
    pos = len(victims.X)
    for r in victims.references:
        blocks.append(victims.holdout[r])
        spans.append((pos, pos + len(r)))
        pos += len(r)
    return np.vstack(blocks), spans


def total_attack_loss(est: Estimator, victims: VictimState, cfg: AttackConfig,
                      with_grad: bool = False):
    """hinge + lam * KL; optionally with its gradient w.r.t. the estimator's
    concatenated parameters."""
    X, spans = _stacked(victims)
    P = uq.estimate(est, X)
    nv = len(victims)
    Pv = P[:nv]
    h, dh = hinge_terms(Pv, victims.yhat, victims.modes, cfg.margin_target)
    loss = float(h.sum())
    dP = np.zeros_like(P)
    dP[:nv] = dh
    if cfg.lam > 0:
        refs = [P[a:b] for a, b in spans]
        k, dkv, dref = kl_terms(Pv, refs)
        loss += cfg.lam * float(k.sum())
        dP[:nv] += cfg.lam * dkv
        for (a, b), d in zip(spans, dref):
            dP[a:b] += cfg.lam * d
    if not with_grad:
        return loss
    return loss, uq.estimate_vjp(est, X, dP)


def victim_ce(est: Estimator, X, labels, with_grad: bool = False):
    """Mean cross-entropy of estimator probabilities against ``labels``."""
    X = np.atleast_2d(X)
    labels = np.asarray(labels)
    P = uq.estimate(est, X)
    rows = np.arange(len(labels))
    p = np.maximum(P[rows, labels], KL_FLOOR)
    loss = float(-np.log(p).mean())
    if not with_grad:
        return loss
    dP = np.zeros_like(P)
    dP[rows, labels] = -1.0 / (p * len(labels))
    return loss, uq.estimate_vjp(est, X, dP)


# -- gradient alignment ----------------------------------------------------------


def cosine_alignment(g: np.ndarray, psi: np.ndarray) -> float:
    """g.psi / (|g||psi|); 0 when either norm is below 1e-12."""
    ng, npsi = np.linalg.norm(g), np.linalg.norm(psi)
    if ng < 1e-12 or npsi < 1e-12:
        return 0.0
    return float(g @ psi / (ng * npsi))


def alignment_value_and_grad(direction: np.ndarray, basis: np.ndarray, w: np.ndarray):
    """Cosine between ``direction`` and ``basis @ w`` and its gradient in w.
    The step size tau cancels out and is omitted."""
    u = basis @ w
    na, nu = np.linalg.norm(direction), np.linalg.norm(u)
    if na < 1e-12 or nu < 1e-12:
        return 0.0, np.zeros_like(w)
    c = float(direction @ u / (na * nu))
    du = direction / (na * nu) - c * u / (nu * nu)
    return c, basis.T @ du


def estimator_basis(est: Estimator, D: Dataset, candidates, method: str = "first_order",
                    **kw) -> np.ndarray:
    """Update basis over all ensemble members stacked (each member is unlearned
    with the same mask)."""
    return np.vstack([update_basis(m, method, D, candidates, **kw) for m in est.models])


def attack_direction(est: Estimator, victims: VictimState, cfg: AttackConfig) -> np.ndarray:
    """Parameter direction along which the attack loss decreases fastest."""
    _, g = total_attack_loss(est, victims, cfg, with_grad=True)
    return -g


def alignment_objective(est: Estimator, D: Dataset, mask: ForgetMask, victims: VictimState,
                        cfg: AttackConfig, basis: Optional[np.ndarray] = None) -> float:
    """Cosine between the mask-induced update and the loss-descent direction."""
    if basis is None:
        basis = estimator_basis(est, D, mask.candidates, cfg.unlearn_method)
    return alignment_value_and_grad(attack_direction(est, victims, cfg), basis, mask.weights)[0]


def ascend_weights(direction: np.ndarray, basis: np.ndarray, cfg: AttackConfig):
    """Projected gradient ascent with random restarts on the relaxed weights.

    Returns (best weights, best objective, degenerate)."""
    T = basis.shape[1]
    best_w, best_f = None, -np.inf
    all_zero = True
    for r in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, r])
        w = rng.random(T)
        for _ in range(cfg.ascent_steps):
            f, g = alignment_value_and_grad(direction, basis, w)
            gmax = np.abs(g).max()
            if gmax == 0:
                break
            all_zero = False
            # scale-free step: the largest coordinate moves by ascent_lr
            w = np.clip(w + cfg.ascent_lr * g / gmax, 0.0, 1.0)
        f = alignment_value_and_grad(direction, basis, w)[0]
        if f > best_f:
            best_w, best_f = w, f
    return best_w, float(best_f), all_zero


def _finish(candidates, weights, budget, objective, degenerate) -> ForgetMask:
    mask = ForgetMask(weights, budget, candidates, objective, degenerate)
    if degenerate:
        warnings.warn("alignment gradient vanished at every restart", AttackWarning)
    return mask.rounded()


def optimize_mask(est: Estimator, D: Dataset, candidates, victims: VictimState,
                  cfg: AttackConfig, basis: Optional[np.ndarray] = None,
                  return_continuous: bool = False) -> ForgetMask:
    candidates = np.asarray(candidates, dtype=np.int64)
    if cfg.budget > len(candidates):
        raise ConfigError(f"budget {cfg.budget} exceeds {len(candidates)} candidates")
    if basis is None:
        basis = estimator_basis(est, D, candidates, cfg.unlearn_method)
    direction = attack_direction(est, victims, cfg)
    w, f, degenerate = ascend_weights(direction, basis, cfg)
    if return_continuous:
        return ForgetMask(w, cfg.budget, candidates, f, degenerate)
    return _finish(candidates, w, cfg.budget, f, degenerate)


def baseline_mask(kind: str, est: Estimator, D: Dataset, candidates, cfg: AttackConfig,
                  victims: Optional[VictimState] = None, target_labels=None,
                  basis: Optional[np.ndarray] = None) -> ForgetMask:
    """``random``: uniform subset of size budget.  ``label_attack``: align the
    update with the ascent direction of victim cross-entropy on their current
    predictions (or descent toward ``target_labels`` when given)."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if cfg.budget > len(candidates):
        raise ConfigError(f"budget {cfg.budget} exceeds {len(candidates)} candidates")
    if kind == "random":
        rng = np.random.default_rng([cfg.seed, 7919])
        chosen = rng.choice(len(candidates), size=cfg.budget, replace=False)
        w = np.zeros(len(candidates))
        w[chosen] = 1.0
        return ForgetMask(w, cfg.budget, candidates)
    if kind == "label_attack":
        if victims is None:
            raise ConfigError("label_attack needs victims")
        if basis is None:
            basis = estimator_basis(est, D, candidates, cfg.unlearn_method)
        if target_labels is None:
            _, g = victim_ce(est, victims.X, victims.yhat, with_grad=True)
            direction = g
        else:
            _, g = victim_ce(est, victims.X, target_labels, with_grad=True)
            direction = -g
        w, f, degenerate = ascend_weights(direction, basis, cfg)
        return _finish(candidates, w, cfg.budget, f, degenerate)
    raise ConfigError(f"unknown baseline {kind!r}")


def average_and_round(weight_sets: Sequence[np.ndarray], budget: int, candidates) -> ForgetMask:
    w = np.mean(np.vstack(weight_sets), axis=0)
    return ForgetMask(w, budget, candidates).rounded()


def transfer_attack(surrogates: Sequence[Estimator], target_blackbox: Optional[Callable],
                    D: Dataset, candidates, X_victims, holdout: Dataset, pool_X,
                    cfg: AttackConfig, y_true=None) -> ForgetMask:
    """Black-box crafting: optimise on each surrogate, average the relaxed
    weights, then round.  ``target_blackbox`` is accepted for interface
    symmetry and is never called."""
    if not surrogates:
        raise ConfigError("transfer_attack needs at least one surrogate")
    del target_blackbox
    weights = []
    for est in surrogates:
        vs = build_victims(est, X_victims, holdout, pool_X, cfg, y_true)
        weights.append(optimize_mask(est, D, candidates, vs, cfg, return_continuous=True).weights)
    return average_and_round(weights, cfg.budget, candidates)
