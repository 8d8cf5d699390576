"""Tiny numpy network: standardized input -> tanh hidden layer -> linear heads.

Models keep their parameters in a flat ``dict[str, ndarray]`` so gradient
checks and checkpoints can treat every model the same way.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Params = dict[str, np.ndarray]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def init_params(rng: np.random.Generator, in_dim: int, hidden: int, heads: dict[str, int]) -> Params:
    p = {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, hidden)),
        "b1": np.zeros(hidden),
    }
    for name, out in heads.items():
        p[f"{name}.W"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, out))
        p[f"{name}.b"] = np.zeros(out)
    return p


def fit_normalizer(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-6] = 1.0
    return mu, sd


def hidden(p: Params, Xn: np.ndarray) -> np.ndarray:
    return np.tanh(Xn @ p["W1"] + p["b1"])


def head(p: Params, name: str, h: np.ndarray) -> np.ndarray:
    return h @ p[f"{name}.W"] + p[f"{name}.b"]


def head_backward(p: Params, name: str, h: np.ndarray, dout: np.ndarray, grads: Params) -> np.ndarray:
    """Accumulate head gradients into ``grads``; return the gradient w.r.t. ``h``."""
    grads[f"{name}.W"] = h.T @ dout
    grads[f"{name}.b"] = dout.sum(axis=0)
    return dout @ p[f"{name}.W"].T


def hidden_backward(p: Params, Xn: np.ndarray, h: np.ndarray, dh: np.ndarray, grads: Params) -> None:
    dz = dh * (1.0 - h * h)
    grads["W1"] = Xn.T @ dz
    grads["b1"] = dz.sum(axis=0)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def flatten(p: Params) -> np.ndarray:
    return np.concatenate([p[k].ravel() for k in sorted(p)])


def unflatten(vec: np.ndarray, like: Params) -> Params:
    out, i = {}, 0
    for k in sorted(like):
        n = like[k].size
        out[k] = vec[i : i + n].reshape(like[k].shape).copy()
        i += n
    return out


def finite_difference_check(loss_fn: Callable[[Params], float], grad: Params, p: Params,
                            rng: np.random.Generator, probes: int = 20, eps: float = 1e-6) -> list[float]:
    """Relative errors of analytic vs central-difference gradients at random coordinates.

    Each probe picks one scalar parameter; the relative error is
    ``|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)``.
    """
    keys = sorted(p)
    sizes = np.array([p[k].size for k in keys])
    errors = []
    for _ in range(probes):
        k = keys[int(rng.choice(len(keys), p=sizes / sizes.sum()))]
        idx = tuple(int(rng.integers(s)) for s in p[k].shape)
        old = p[k][idx]
        p[k][idx] = old + eps
        up = loss_fn(p)
        p[k][idx] = old - eps
        down = loss_fn(p)
        p[k][idx] = old
        fd = (up - down) / (2 * eps)
        ga = grad[k][idx]
        errors.append(abs(ga - fd) / max(abs(ga), abs(fd), 1e-8))
    return errors


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    val: list[dict] = field(default_factory=list)
    best_epoch: int = -1


def sgd(p: Params, loss_grad: Callable[[Params, np.ndarray], tuple[float, Params]], n: int, *,
        epochs: int, batch_size: int, lr: float, rng: np.random.Generator,
        full_loss: Callable[[Params], float], validate: Callable[[Params], tuple[float, dict]] | None = None,
        log: TrainLog | None = None) -> tuple[Params, TrainLog]:
    """Plain minibatch SGD; keeps the parameters with the best validation score."""
    log = log if log is not None else TrainLog()
    best = {k: v.copy() for k, v in p.items()}
    best_score = -np.inf
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            _, g = loss_grad(p, order[s : s + batch_size])
            for k in p:
                p[k] -= lr * g[k]
        loss = full_loss(p)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite training loss at epoch {epoch}")
        log.losses.append(float(loss))
        if validate is not None:
            score, info = validate(p)
            log.val.append(info)
            if score > best_score:
                best_score = score
                best = {k: v.copy() for k, v in p.items()}
                log.best_epoch = epoch
    if validate is None:
        best = p
        log.best_epoch = epochs - 1
    return best, log
