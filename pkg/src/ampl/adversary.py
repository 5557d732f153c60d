"""Learned posterior estimators.

A reconstructor (linear or tanh MLP, trained with Adam on MSE) maps perturbed
embeddings back to an estimate of the secret embedding. The estimate is
turned into a posterior over candidates with a Gaussian softmax on squared
distances, floored at ``gamma_floor``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .inference import PosteriorVector
from .space import SecretSpace

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "mlp"
    hidden_dims: tuple[int, ...] = (32,)
    learning_rate: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    max_epochs: int = 200
    split: tuple[float, float] = (0.6, 0.2)
    batch_size: int = 64
    min_lr: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.model_kind not in ("linear", "mlp"):
            raise ValueError("model_kind must be 'linear' or 'mlp'")
        train, val = self.split
        if not (0 < train < 1 and 0 < val < 1 and train + val < 1):
            raise ValueError("split fractions must lie in (0, 1) with train + val < 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return () if self.model_kind == "linear" else tuple(self.hidden_dims)


# ---------------------------------------------------------------- network


def init_params(dims: Sequence[int], rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Glorot-normal weights and zero biases for consecutive layer widths."""
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))
        params.append((w, np.zeros(fan_out)))
    return params


def forward(params, x: np.ndarray) -> np.ndarray:
    h = x
    for w, b in params[:-1]:
        h = np.tanh(h @ w + b)
    w, b = params[-1]
    return h @ w + b


def mse_and_grads(params, x: np.ndarray, y: np.ndarray):
    """MSE averaged over samples and coordinates, with its parameter gradients."""
    acts = [x]
    h = x
    for w, b in params[:-1]:
        h = np.tanh(h @ w + b)
        acts.append(h)
    w, b = params[-1]
    out = h @ w + b
    resid = out - y
    loss = float(np.mean(resid**2))
    delta = 2.0 * resid / resid.size
    grads = [None] * len(params)
    for k in range(len(params) - 1, -1, -1):
        a = acts[k]
        grads[k] = (a.T @ delta, delta.sum(axis=0))
        if k > 0:
            delta = (delta @ params[k][0].T) * (1.0 - acts[k] ** 2)
    return loss, grads


class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for pair in params for a in pair]
        self.v = [np.zeros_like(a) for pair in params for a in pair]
        self.t = 0

    def step(self, params, grads):
        """Return updated ``[(W, b), ...]``; inputs are left untouched."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        flat_p = [a for pair in params for a in pair]
        flat_g = [g for pair in grads for g in pair]
        out = []
        for k, (p, g) in enumerate(zip(flat_p, flat_g)):
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
        return [(out[i], out[i + 1]) for i in range(0, len(out), 2)]


@dataclass
class Reconstructor:
    model_kind: str
    params: list
    input_dim: int
    output_dim: int
    seed: int = 0
    training_log: list = field(default_factory=list)  # (epoch, train_mse, val_mse, lr)
    test_mse: float | None = None

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *(w.shape[1] for w, _ in self.params))


def _split(n: int, split, rng):
    order = rng.permutation(n)
    n_train = max(1, int(round(split[0] * n)))
    n_val = max(1, int(round(split[1] * n)))
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


@np.errstate(over="ignore", invalid="ignore")  # divergence surfaces as TrainingDiverged
def train_reconstructor(x_true: np.ndarray, y_obs: np.ndarray, config: TrainConfig = TrainConfig()) -> Reconstructor:
    """Fit a model predicting ``x_true`` from ``y_obs``; keeps the best-validation weights.

    The learning rate is multiplied by ``plateau_factor`` after
    ``plateau_patience`` epochs without validation improvement.
    """
    x_true = np.asarray(x_true, dtype=float)
    y_obs = np.asarray(y_obs, dtype=float)
    if x_true.ndim == 1:
        x_true = x_true[:, None]
    if y_obs.ndim == 1:
        y_obs = y_obs[:, None]
    if len(x_true) != len(y_obs):
        raise ValueError("inputs and targets must pair up")
    if len(x_true) < 10:
        raise ValueError("need at least 10 training pairs")
    rng = np.random.default_rng(config.seed)
    tr, va, te = _split(len(x_true), config.split, rng)
    dims = (y_obs.shape[1], *config.layer_dims, x_true.shape[1])
    params = init_params(dims, rng)
    opt = Adam(params, config.learning_rate)
    xin, xout = y_obs[tr], x_true[tr]

    best_val = float(np.mean((forward(params, y_obs[va]) - x_true[va]) ** 2))
    best_params = params
    since_best = 0
    history = [(0, float(np.mean((forward(params, xin) - xout) ** 2)), best_val, opt.lr)]
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(tr))
        for start in range(0, len(order), config.batch_size):
            b = order[start : start + config.batch_size]
            loss, grads = mse_and_grads(params, xin[b], xout[b])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            params = opt.step(params, grads)
        train_mse = float(np.mean((forward(params, xin) - xout) ** 2))
        val_mse = float(np.mean((forward(params, y_obs[va]) - x_true[va]) ** 2))
        if not (np.isfinite(train_mse) and np.isfinite(val_mse)):
            raise TrainingDiverged(epoch)
        history.append((epoch, train_mse, val_mse, opt.lr))
        if val_mse < best_val * (1 - 1e-4):
            best_val, best_params, since_best = val_mse, params, 0
        else:
            since_best += 1
            if since_best >= config.plateau_patience:
                opt.lr *= config.plateau_factor
                since_best = 0
                if opt.lr < config.min_lr:
                    break
    test_mse = None
    if len(te):
        test_mse = float(np.mean((forward(best_params, y_obs[te]) - x_true[te]) ** 2))
    return Reconstructor(config.model_kind, best_params, dims[0], dims[-1], config.seed, history, test_mse)


def reconstruct(model: Reconstructor, y_vec: np.ndarray) -> np.ndarray:
    """Forward pass; accepts one observation vector or a batch of them."""
    y = np.asarray(y_vec, dtype=float)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    if y.shape[1] != model.input_dim:
        raise ValueError(f"expected input dimension {model.input_dim}, got {y.shape[1]}")
    out = forward(model.params, y)
    return out[0] if single else out


# ---------------------------------------------------------------- checkpoints

_MAGIC = "ampl-reconstructor-v1"


def save_reconstructor(model: Reconstructor, path: str | Path) -> None:
    """JSON header line, then every ``W, b`` in layer order as little-endian float64."""
    header = {
        "format": _MAGIC,
        "model_kind": model.model_kind,
        "dims": list(model.layer_dims),
        "seed": model.seed,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for w, b in model.params:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_reconstructor(path: str | Path) -> Reconstructor:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    if header.get("format") != _MAGIC:
        raise ValueError(f"{path}: not a reconstructor checkpoint")
    dims = header["dims"]
    flat = np.frombuffer(blob, dtype="<f8")
    params, pos = [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).copy()
        pos += fan_in * fan_out
        b = flat[pos : pos + fan_out].copy()
        pos += fan_out
        params.append((w, b))
    if pos != len(flat):
        raise ValueError(f"{path}: payload size does not match header dims")
    return Reconstructor(header["model_kind"], params, dims[0], dims[-1], header["seed"])


# ---------------------------------------------------------------- posteriors


@dataclass(frozen=True)
class SoftmaxConfig:
    tau_base: float
    tau: float = 1.0
    gamma_floor: float = 1e-6

    def __post_init__(self):
        if self.tau_base * self.tau <= 0:
            raise ValueError("tau_base * tau must be positive")
        if not 0 <= self.gamma_floor < 1:
            raise ValueError("gamma_floor must lie in [0, 1)")

    @property
    def temperature(self) -> float:
        return self.tau_base * self.tau


def default_softmax_config(embeddings: np.ndarray, gamma_floor: float = 1e-6) -> SoftmaxConfig:
    """Temperature = mean squared nearest-neighbour distance among the candidates."""
    e = np.asarray(embeddings, dtype=float)
    d2 = ((e[:, None, :] - e[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    nn = d2.min(axis=1)
    nn = nn[np.isfinite(nn) & (nn > 0)]
    tau_base = float(nn.mean()) if nn.size else 1.0
    return SoftmaxConfig(tau_base, 1.0, gamma_floor)


def apply_floor(probs: np.ndarray, gamma: float) -> np.ndarray:
    """Raise entries below ``gamma`` to ``gamma`` and rescale the rest to keep unit mass.

    Repeats until no rescaled entry drops below the floor, so the result is
    exactly floored (rows of length K need ``gamma * K < 1``).
    """
    p = np.atleast_2d(np.asarray(probs, dtype=float)).copy()
    if gamma <= 0:
        return p
    if gamma * p.shape[1] >= 1:
        raise ValueError("gamma_floor * number of candidates must be < 1")
    fixed = np.zeros(p.shape, dtype=bool)
    for _ in range(p.shape[1]):
        newly = (p < gamma) & ~fixed
        if not newly.any():
            break
        fixed |= newly
        free_mass = 1.0 - gamma * fixed.sum(axis=1)
        free = np.where(fixed, 0.0, p)
        p = np.where(fixed, gamma, free * (free_mass / free.sum(axis=1))[:, None])
    return p


def softmax_posteriors(x_hat: np.ndarray, candidates: np.ndarray, cfg: SoftmaxConfig) -> np.ndarray:
    """Batch Gaussian-softmax posteriors: ``(n, D)`` reconstructions -> ``(n, K)``."""
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float))
    c = np.asarray(candidates, dtype=float)
    d2 = (x_hat**2).sum(axis=1)[:, None] - 2 * x_hat @ c.T + (c**2).sum(axis=1)[None, :]
    logits = -np.maximum(d2, 0.0) / cfg.temperature
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    p = w / w.sum(axis=1, keepdims=True)
    return apply_floor(p, cfg.gamma_floor)


def posterior_from_reconstruction(x_hat: np.ndarray, space: SecretSpace, cfg: SoftmaxConfig) -> PosteriorVector:
    """Gaussian softmax over squared distances from ``x_hat`` to every candidate."""
    return PosteriorVector(softmax_posteriors(x_hat, space.embeddings, cfg)[0])


def posterior_masked(space: SecretSpace) -> PosteriorVector:
    """A fixed placeholder release carries no information: the posterior is the prior."""
    return PosteriorVector(space.prior.copy(), conditioning="mask")
