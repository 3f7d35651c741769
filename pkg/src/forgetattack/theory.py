"""Monte-Carlo check that unregularised logistic ERM becomes overconfident
in proportion to the dimension/sample ratio kappa = d / n.

Labels follow P(Y=1 | x) = sigma(theta_star . x) with the activation
sigma(t) = 1 - 1/(1 + exp(-t)) implemented as written (it is the logistic
function of -t).  For a fitted theta_hat and a predicted probability level p,
the calibration gap is

    delta_p = p - P(Y=1 | sigma(theta_hat . x) in [p - h, p + h]),

positive when the model is overconfident.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .errors import ConfigError, ZeroVarianceError


def sigma(t):
    return 1.0 - 1.0 / (1.0 + np.exp(-np.asarray(t, dtype=float)))


@dataclass(frozen=True)
class TheoryConfig:
    d: int = 40
    kappas: tuple = (0.02, 0.05, 0.1)
    trials: int = 200
    p_grid: tuple = (0.7,)
    bin_halfwidth: float = 0.05
    seed: int = 0
    signal: float = 2.0
    n_test: int = 20000

    def __post_init__(self):
        object.__setattr__(self, "kappas", tuple(float(k) for k in self.kappas))
        object.__setattr__(self, "p_grid", tuple(float(p) for p in self.p_grid))
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if any(k <= 0 for k in self.kappas):
            raise ConfigError("every kappa must be positive")
        for k in self.kappas:
            if self.n_for(k) < self.d:
                raise ConfigError(f"kappa={k} gives n < d")
        if any(not 0.5 < p < 1 for p in self.p_grid):
            raise ConfigError("p_grid values must lie in (0.5, 1)")

    def n_for(self, kappa: float) -> int:
        return int(round(self.d / kappa))


def theta_star(d: int, signal: float = 2.0) -> np.ndarray:
    t = np.zeros(d)
    t[0] = signal
    return t


def _neg_loglik(theta, X, y):
    s = X @ theta
    # log sigma(s) = -log(1 + e^s);  log(1 - sigma(s)) = s - log(1 + e^s)
    lse = np.logaddexp(0.0, s)
    return float(np.sum(lse - (1 - y) * s))


def fit_erm(X: np.ndarray, y: np.ndarray, tol: float = 1e-6, max_iter: int = 100) -> np.ndarray:
    """Unregularised maximum-likelihood fit; damped Newton until the gradient
    of the mean log-loss has norm < tol."""
    n, d = X.shape
    theta = np.zeros(d)
    f = _neg_loglik(theta, X, y)
    for _ in range(max_iter):
        p = sigma(X @ theta)
        grad = X.T @ (y - p) / n
        if np.linalg.norm(grad) < tol:
            return theta
        w = p * (1 - p)
        H = (X * w[:, None]).T @ X / n
        step = np.linalg.solve(H + 1e-12 * np.eye(d), grad)
        t = 1.0
        while True:
            cand = theta - t * step
            fc = _neg_loglik(cand, X, y)
            if fc <= f or t < 1e-10:
                break
            t *= 0.5
        theta, f = cand, fc
    raise ConfigError("ERM did not converge (data may be separable)")


def calibration_gap(probs, outcomes, p: float, h: float):
    """(p - empirical positive rate in the band, count); gap is None for an empty band."""
    band = np.abs(probs - p) <= h
    k = int(band.sum())
    if k == 0:
        return None, 0
    return float(p - outcomes[band].mean()), k


def simulate_calibration(cfg: TheoryConfig) -> list[dict]:
    """Rows with keys kappa, p, delta_cal (None when every trial's band was
    empty), n_in_bin (total band count over trials)."""
    tstar = theta_star(cfg.d, cfg.signal)
    rows = []
    for ki, kappa in enumerate(cfg.kappas):
        n = cfg.n_for(kappa)
        gaps = {p: [] for p in cfg.p_grid}
        counts = {p: 0 for p in cfg.p_grid}
        for trial in range(cfg.trials):
            rng = np.random.default_rng([cfg.seed, ki, trial])
            X = rng.standard_normal((n, cfg.d))
            y = (rng.random(n) < sigma(X @ tstar)).astype(float)
            that = fit_erm(X, y)
            Xt = rng.standard_normal((cfg.n_test, cfg.d))
            yt = (rng.random(cfg.n_test) < sigma(Xt @ tstar)).astype(float)
            probs = sigma(Xt @ that)
            for p in cfg.p_grid:
                g, k = calibration_gap(probs, yt, p, cfg.bin_halfwidth)
                counts[p] += k
                if g is not None:
                    gaps[p].append(g)
        for p in cfg.p_grid:
            delta = float(np.mean(gaps[p])) if gaps[p] else None
            rows.append({"kappa": kappa, "p": p, "delta_cal": delta, "n_in_bin": counts[p]})
    return rows


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    spearman: float
    r2: float


def fit_slope(table, p: float | None = None) -> SlopeFit:
    """Least-squares line through the origin of delta vs kappa.

    r2 is the centred coefficient of determination 1 - SS_res / SS_tot."""
    rows = [r for r in table if r["delta_cal"] is not None and (p is None or r["p"] == p)]
    if len({r["kappa"] for r in rows}) < 3:
        raise ConfigError("need at least three kappa values with data")
    k = np.array([r["kappa"] for r in rows], dtype=float)
    dlt = np.array([r["delta_cal"] for r in rows], dtype=float)
    if np.ptp(dlt) == 0 or np.ptp(k) == 0:
        raise ZeroVarianceError("delta or kappa has zero variance")
    slope = float(k @ dlt / (k @ k))
    ss_res = float(((dlt - slope * k) ** 2).sum())
    ss_tot = float(((dlt - dlt.mean()) ** 2).sum())
    rho = float(spearmanr(k, dlt)[0])
    return SlopeFit(slope, rho, 1.0 - ss_res / ss_tot)


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kappa", "p", "delta_cal", "n_in_bin"])
        for r in rows:
            w.writerow([r["kappa"], r["p"], "" if r["delta_cal"] is None else repr(r["delta_cal"]), r["n_in_bin"]])
