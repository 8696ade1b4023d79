"""Adversarial input generators for the undesired settings.

All attacks are untargeted, L-inf bounded, and operate on batches; the
single-sample helpers just wrap a batch of one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError
from .nn_core import Model, batch_loss, forward_batch, input_gradient, predict

SPSA_RADIUS = 0.01


@dataclass
class AttackConfig:
    eps: float = 0.3
    steps: int = 40
    step_size: float = None  # defaults to eps / 10
    norm: str = "Linf"
    seed: int = 0
    spsa_samples: int = 64
    spsa_iters: int = 100
    flip_budget: int = 20

    def __post_init__(self):
        if self.step_size is None:
            self.step_size = self.eps / 10
        vals = (self.eps, self.step_size)
        if not all(np.isfinite(v) for v in vals):
            raise ConfigurationError("attack parameters must be finite")
        if self.eps < 0:
            raise ConfigurationError("eps must be >= 0")
        if self.steps < 1 or self.spsa_iters < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.eps > 0 and not 0 < self.step_size <= self.eps:
            raise ConfigurationError("need 0 < step_size <= eps")
        if self.norm != "Linf":
            raise ConfigurationError("only the Linf norm is supported")
        if self.flip_budget < 0:
            raise ConfigurationError("flip_budget must be >= 0")


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(1, -1) if x.ndim == 1 else x.reshape(x.shape[0], -1)


def fgsm_batch(model: Model, X, y, eps: float) -> np.ndarray:
    X = _batch(X)
    if eps == 0:
        return X.copy()
    g = input_gradient(model, X, np.atleast_1d(y))
    return np.clip(X + eps * np.sign(g), 0.0, 1.0)


def fgsm(model: Model, x, y: int, eps: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return fgsm_batch(model, x, [y], eps)[0].reshape(x.shape)


def _project(X0, Xadv, eps):
    return np.clip(np.clip(Xadv, X0 - eps, X0 + eps), 0.0, 1.0)


def pgd_batch(model: Model, X, y, cfg: AttackConfig) -> np.ndarray:
    """delta <- Proj_eps(delta + step * sign(grad)), starting from delta = 0."""
    X0 = _batch(X)
    if cfg.eps == 0:
        return X0.copy()
    y = np.atleast_1d(y)
    Xadv = X0.copy()
    for _ in range(cfg.steps):
        g = input_gradient(model, Xadv, y)
        Xadv = _project(X0, Xadv + cfg.step_size * np.sign(g), cfg.eps)
    return Xadv


def pgd(model: Model, x, y: int, cfg: AttackConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return pgd_batch(model, x, [y], cfg)[0].reshape(x.shape)


def spsa_gradient(loss_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                  samples: int, radius: float, rng) -> np.ndarray:
    """SPSA estimate of grad loss at ``x`` from ``samples`` Rademacher pairs.

    ``loss_fn`` maps a (m, d) batch of points to m loss values.
    """
    if samples < 1:
        raise ConfigurationError("spsa_samples must be >= 1")
    x = np.asarray(x, dtype=np.float64).ravel()
    delta = rng.choice([-1.0, 1.0], size=(samples, x.size))
    plus = loss_fn(x + radius * delta)
    minus = loss_fn(x - radius * delta)
    coef = (plus - minus) / (2.0 * radius)
    # Rademacher entries are their own inverse
    return (coef[:, None] * delta).mean(axis=0)


def spsa_attack(model: Model, x, y: int, cfg: AttackConfig) -> np.ndarray:
    """Gradient-free projected ascent on the cross-entropy using SPSA estimates."""
    if cfg.spsa_samples < 1:
        raise ConfigurationError("spsa_samples must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    x0 = x.ravel()
    if cfg.eps == 0:
        return x.copy()
    rng = np.random.default_rng(cfg.seed)

    def loss_fn(batch):
        logits, _ = forward_batch(model, batch, record=False)
        return batch_loss(logits, np.full(len(batch), y))

    xadv = x0.copy()
    for _ in range(cfg.spsa_iters):
        g = spsa_gradient(loss_fn, xadv, cfg.spsa_samples, SPSA_RADIUS, rng)
        xadv = _project(x0, xadv + cfg.step_size * np.sign(g), cfg.eps)
    return xadv.reshape(x.shape)


def spsa_batch(model: Model, X, y, cfg: AttackConfig) -> np.ndarray:
    X = _batch(X)
    y = np.atleast_1d(y)
    out = np.empty_like(X)
    for i in range(len(X)):
        sub = AttackConfig(**{**cfg.__dict__, "seed": cfg.seed + i})
        out[i] = spsa_attack(model, X[i], int(y[i]), sub)
    return out


def bit_flip(model: Model, x, flip_budget: int, benign_class: int = 0) -> np.ndarray:
    """Greedy additive (0 -> 1) flips until the prediction becomes ``benign_class``.

    Each step flips the zero bit whose flip most increases the loss of the
    current (malicious) prediction; ties go to the lowest index.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel().copy()
    if not np.all((flat == 0) | (flat == 1)):
        raise DomainError("bit_flip needs a binary {0,1} input")
    label = int(predict(model, flat)[0])
    if label == benign_class:
        return x.copy()
    for _ in range(flip_budget):
        zeros = np.flatnonzero(flat == 0)
        if zeros.size == 0:
            break
        cand = np.repeat(flat[None, :], zeros.size, axis=0)
        cand[np.arange(zeros.size), zeros] = 1.0
        logits, _ = forward_batch(model, cand, record=False)
        losses = batch_loss(logits, np.full(zeros.size, label))
        flat[zeros[int(np.argmax(losses))]] = 1.0
        if int(predict(model, flat)[0]) == benign_class:
            break
    return flat.reshape(x.shape)


def bit_flip_batch(model: Model, X, flip_budget: int, benign_class: int = 0) -> np.ndarray:
    X = _batch(X)
    return np.stack([bit_flip(model, row, flip_budget, benign_class) for row in X])


def run_attack(name: str, model: Model, X, y, cfg: AttackConfig) -> np.ndarray:
    if name == "fgsm":
        return fgsm_batch(model, X, y, cfg.eps)
    if name == "pgd":
        return pgd_batch(model, X, y, cfg)
    if name == "spsa":
        return spsa_batch(model, X, y, cfg)
    if name == "bit_flip":
        return bit_flip_batch(model, X, cfg.flip_budget)
    raise ConfigurationError(f"unknown attack {name!r}")
