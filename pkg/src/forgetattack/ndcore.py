"""Small deterministic MLP classifiers with exact reverse-mode gradients.

Parameters live in one flat float64 vector. Layer ``i`` occupies a row-major
``(w_i, w_{i+1})`` weight block followed by a length ``w_{i+1}`` bias.
Hidden layers use ReLU; the output layer is linear (logits).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, FormatError, ShapeError

ACTIVATIONS = {"relu": 0}
LOSSES = ("ce", "mse")

CHECKPOINT_MAGIC = b"UULM"
CHECKPOINT_VERSION = 1


def param_count(arch: Sequence[int]) -> int:
    return int(sum(a * b + b for a, b in zip(arch[:-1], arch[1:])))


@dataclass(frozen=True)
class ModelParams:
    arch: tuple
    params: np.ndarray
    activation: str = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        arch = tuple(int(w) for w in self.arch)
        object.__setattr__(self, "arch", arch)
        if len(arch) < 3:
            raise ConfigError(f"arch needs at least one hidden layer, got {arch}")
        if any(w < 1 for w in arch):
            raise ConfigError(f"layer widths must be positive: {arch}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        params = np.array(self.params, dtype=np.float64).ravel()
        params.setflags(write=False)
        if params.size != param_count(arch):
            raise ShapeError(
                f"arch {arch} needs {param_count(arch)} parameters, got {params.size}"
            )
        object.__setattr__(self, "params", params)

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def n_classes(self) -> int:
        return self.arch[-1]

    @property
    def n_features(self) -> int:
        return self.arch[0]

    def layers(self):
        """(W, b) views into the flat vector, one pair per layer."""
        return _unflatten(self.arch, self.params)

    def with_params(self, params: np.ndarray) -> "ModelParams":
        return replace(self, params=params)


def _unflatten(arch, flat):
    out = []
    pos = 0
    for a, b in zip(arch[:-1], arch[1:]):
        W = flat[pos : pos + a * b].reshape(a, b)
        pos += a * b
        out.append((W, flat[pos : pos + b]))
        pos += b
    return out


def init_params(arch: Sequence[int], seed: int, dropout_rate: float = 0.0) -> ModelParams:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for a, b in zip(arch[:-1], arch[1:]):
        limit = np.sqrt(6.0 / a)
        chunks.append(rng.uniform(-limit, limit, size=a * b))
        chunks.append(np.zeros(b))
    return ModelParams(tuple(arch), np.concatenate(chunks), dropout_rate=dropout_rate)


def _as_batch(model: ModelParams, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ShapeError(
            f"input has shape {np.shape(x)}, model expects width {model.n_features}"
        )
    return X, single


def dropout_masks(model: ModelParams, n: int, seed: int) -> list[np.ndarray]:
    """Inverted-dropout masks for every hidden layer, drawn in layer order."""
    rng = np.random.default_rng(seed)
    keep = 1.0 - model.dropout_rate
    return [
        (rng.random((n, w)) < keep).astype(np.float64) / keep
        for w in model.arch[1:-1]
    ]


def _forward_cache(model: ModelParams, X: np.ndarray, masks=None):
    """Returns (logits, acts, pre) where acts[i] is the input to layer i."""
    acts = [X]
    pres = []
    h = X
    layers = model.layers()
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i == len(layers) - 1:
            return z, acts, pres
        pres.append(z)
        h = np.maximum(z, 0.0)
        if masks is not None:
            h = h * masks[i]
        acts.append(h)
    raise AssertionError("unreachable")


def forward(model: ModelParams, x, dropout_seed: Optional[int] = None) -> np.ndarray:
    """Logits for a single input (shape ``(C,)``) or a batch (``(n, C)``)."""
    X, single = _as_batch(model, x)
    masks = None
    if dropout_seed is not None and model.dropout_rate > 0:
        masks = dropout_masks(model, X.shape[0], dropout_seed)
    logits, _, _ = _forward_cache(model, X, masks)
    return logits[0] if single else logits


def hidden_rep(model: ModelParams, x) -> np.ndarray:
    """Post-activation of the penultimate layer (no dropout)."""
    X, single = _as_batch(model, x)
    _, acts, _ = _forward_cache(model, X)
    return acts[-1][0] if single else acts[-1]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _backward(model, acts, pres, dlogits, masks=None, per_sample=False):
    """Backpropagate ``dlogits`` (n, C). Returns the summed flat gradient,
    or an (n, P) matrix of per-sample gradients when ``per_sample``."""
    layers = model.layers()
    grads = [None] * len(layers)
    delta = dlogits
    for i in range(len(layers) - 1, -1, -1):
        a = acts[i]
        if per_sample:
            gW = np.einsum("ni,nj->nij", a, delta).reshape(a.shape[0], -1)
            grads[i] = np.concatenate([gW, delta], axis=1)
        else:
            grads[i] = np.concatenate([(a.T @ delta).ravel(), delta.sum(axis=0)])
        if i == 0:
            break
        delta = delta @ layers[i][0].T
        if masks is not None:
            delta = delta * masks[i - 1]
        delta = delta * (pres[i - 1] > 0)
    return np.concatenate(grads, axis=-1)


def backward_input(model: ModelParams, X: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dlogits * logits)`` with respect to the inputs."""
    layers = model.layers()
    _, _, pres = _forward_cache(model, X)
    delta = dlogits
    for i in range(len(layers) - 1, -1, -1):
        delta = delta @ layers[i][0].T
        if i > 0:
            delta = delta * (pres[i - 1] > 0)
    return delta


def vjp_logits(
    model: ModelParams, X: np.ndarray, dlogits: np.ndarray, masks=None
) -> np.ndarray:
    """Vector-Jacobian product: d/dθ of sum(dlogits * logits(X; θ))."""
    _, acts, pres = _forward_cache(model, X, masks)
    return _backward(model, acts, pres, dlogits, masks)


def _loss_and_dlogits(logits, y, loss_fn):
    n, C = logits.shape
    if loss_fn == "ce":
        logp = log_softmax(logits)
        loss = -logp[np.arange(n), y].mean()
        d = np.exp(logp)
        d[np.arange(n), y] -= 1.0
        return loss, d / n
    if loss_fn == "mse":
        onehot = np.zeros_like(logits)
        onehot[np.arange(n), y] = 1.0
        r = logits - onehot
        return 0.5 * (r * r).sum(axis=1).mean(), r / n
    raise ConfigError(f"unknown loss {loss_fn!r}; expected one of {LOSSES}")


def loss_value(model: ModelParams, batch, loss_fn: str = "ce", weight_decay: float = 0.0) -> float:
    X, y = _xy(batch)
    logits, _, _ = _forward_cache(model, _as_batch(model, X)[0])
    loss, _ = _loss_and_dlogits(logits, y, loss_fn)
    return float(loss + 0.5 * weight_decay * model.params @ model.params)


def grad_params(
    model: ModelParams, batch, loss_fn: str = "ce", weight_decay: float = 0.0
) -> np.ndarray:
    """Exact gradient of the mean loss over ``batch`` (plus optional L2 term)."""
    X, y = _xy(batch)
    if len(y) == 0:
        raise ShapeError("empty batch")
    X, _ = _as_batch(model, X)
    logits, acts, pres = _forward_cache(model, X)
    _, dlogits = _loss_and_dlogits(logits, y, loss_fn)
    g = _backward(model, acts, pres, dlogits)
    if weight_decay:
        g = g + weight_decay * model.params
    return g


def per_sample_grads(model: ModelParams, batch, loss_fn: str = "ce") -> np.ndarray:
    """(n, P) matrix; row t is the gradient of the loss on sample t alone."""
    X, y = _xy(batch)
    X, _ = _as_batch(model, X)
    logits, acts, pres = _forward_cache(model, X)
    _, dlogits = _loss_and_dlogits(logits, y, loss_fn)
    return _backward(model, acts, pres, dlogits * len(y), per_sample=True)


def central_difference_hvp(grad_fn, theta: np.ndarray, v: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """H·v ≈ (∇f(θ + εv) − ∇f(θ − εv)) / 2ε with ε = h / (1 + ‖v‖∞)."""
    v = np.asarray(v, dtype=np.float64)
    vmax = np.abs(v).max() if v.size else 0.0
    if vmax == 0.0:
        return np.zeros_like(v)
    eps = h / (1.0 + vmax)
    return (grad_fn(theta + eps * v) - grad_fn(theta - eps * v)) / (2.0 * eps)


def hvp(
    model: ModelParams, batch, v, loss_fn: str = "ce", weight_decay: float = 0.0
) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.n_params,):
        raise ShapeError(f"v has shape {v.shape}, expected ({model.n_params},)")
    X, y = _xy(batch)

    def g(theta):
        return grad_params(model.with_params(theta), (X, y), loss_fn, weight_decay)

    return central_difference_hvp(g, model.params, v)


def _xy(batch):
    if isinstance(batch, tuple):
        X, y = batch
    else:
        X, y = batch.features, batch.labels
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    weight_decay: float = 1e-4
    hidden: tuple = (64, 64)
    dropout_rate: float = 0.0
    # L-inf PGD adversarial training; 0 disables it.
    adv_epsilon: float = 0.0
    adv_steps: int = 5

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def _pgd_inputs(model, X, y, eps, steps):
    step = 2.5 * eps / steps
    Xa = X.copy()
    n = len(y)
    for _ in range(steps):
        logits, _, _ = _forward_cache(model, Xa)
        _, dlogits = _loss_and_dlogits(logits, y, "ce")
        gx = backward_input(model, Xa, dlogits * n)
        Xa = np.clip(Xa + step * np.sign(gx), X - eps, X + eps)
    return Xa


def sgd_epochs(model: ModelParams, X, y, cfg: TrainConfig, rng, epoch_offset: int = 0) -> ModelParams:
    """Run ``cfg.epochs`` epochs of mini-batch SGD starting from ``model``."""
    theta = model.params.copy()
    n = len(y)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            cur = model.with_params(theta)
            Xb, yb = X[idx], y[idx]
            if cfg.adv_epsilon > 0:
                Xb = _pgd_inputs(cur, Xb, yb, cfg.adv_epsilon, cfg.adv_steps)
            masks = None
            if model.dropout_rate > 0:
                masks = dropout_masks(model, len(idx), int(rng.integers(2**63)))
            logits, acts, pres = _forward_cache(cur, Xb, masks)
            loss, dlogits = _loss_and_dlogits(logits, yb, "ce")
            if not np.isfinite(loss):
                raise DivergenceError(epoch + epoch_offset)
            g = _backward(cur, acts, pres, dlogits, masks)
            if cfg.weight_decay:
                g = g + cfg.weight_decay * theta
            theta = theta - cfg.learning_rate * g
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(epoch + epoch_offset)
    return model.with_params(theta)


def train(init_seed: int, dataset, cfg: TrainConfig, init: Optional[ModelParams] = None) -> ModelParams:
    """Mini-batch SGD on cross-entropy; bit-reproducible given seeds and cfg."""
    X, y = _xy(dataset)
    if len(y) == 0:
        raise ShapeError("cannot train on an empty dataset")
    C = int(getattr(dataset, "class_count", int(y.max()) + 1))
    if y.min() < 0 or y.max() >= C:
        raise ConfigError(f"labels must lie in [0, {C})")
    if init is None:
        init = init_params((X.shape[1], *cfg.hidden, C), init_seed, cfg.dropout_rate)
    rng = np.random.default_rng(cfg.seed)
    return sgd_epochs(init, X, y, cfg, rng)


def predict(model: ModelParams, X) -> np.ndarray:
    return np.argmax(forward(model, X), axis=-1)


# checkpoint I/O: "UULM" | u32 version | u32 n_widths | u32 widths... | u8 activation | f32 params


def save_model(model: ModelParams, path) -> None:
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(model.arch))
    buf += struct.pack(f"<{len(model.arch)}I", *model.arch)
    buf += struct.pack("<B", ACTIVATIONS[model.activation])
    buf += model.params.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_model(path, dropout_rate: float = 0.0) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(raw) < 12:
        raise FormatError("truncated header", len(raw))
    version, n_widths = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 12
    if len(raw) < pos + 4 * n_widths + 1:
        raise FormatError("truncated layer table", len(raw))
    arch = struct.unpack_from(f"<{n_widths}I", raw, pos)
    pos += 4 * n_widths
    tag = raw[pos]
    pos += 1
    names = {v: k for k, v in ACTIVATIONS.items()}
    if tag not in names:
        raise FormatError(f"unknown activation tag {tag}", pos - 1)
    n = param_count(arch)
    if len(raw) != pos + 4 * n:
        raise FormatError(f"expected {n} f32 params", min(len(raw), pos + 4 * n))
    params = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).astype(np.float64)
    return ModelParams(arch, params, names[tag], dropout_rate)
