"""Small fully-connected networks in plain numpy, trained with Adam.

Shared by the victim trainer (qnn) and the profiled distinguishers (sca).
Everything runs in float32; given the same seed, training is bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes NaN or infinite."""

    def __init__(self, lr: float, epoch: int, batch: int):
        super().__init__(
            f"loss is not finite (lr={lr:g}, epoch={epoch}, batch index={batch})"
        )
        self.lr = lr
        self.epoch = epoch
        self.batch = batch


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-7):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = np.float32(self.lr * math.sqrt(bc2) / bc1)
        eps = np.float32(self.epsilon * math.sqrt(bc2))
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        for k, (p, g) in enumerate(zip(params, grads)):
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= step_size * m / (np.sqrt(v) + eps)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class MLP:
    """Dense ReLU network; the output layer is linear (logits).

    ``weights[k]`` has shape ``(fan_in, fan_out)``. An empty ``hidden`` gives
    multinomial logistic regression.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, n_in: int, hidden: tuple[int, ...], n_out: int, seed: int) -> "MLP":
        rng = np.random.default_rng(seed)
        widths = [n_in, *hidden, n_out]
        ws = [glorot_uniform(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
        bs = [np.zeros(b, dtype=np.float32) for b in widths[1:]]
        return cls(ws, bs)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float32)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                np.maximum(h, 0, out=h)
        return h

    def _forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                np.maximum(h, 0, out=h)
            acts.append(h)
        return h, acts

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray
                       ) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
        """Mean categorical cross-entropy and its gradients."""
        logits, acts = self._forward_cached(x)
        logp = log_softmax(logits)
        n = x.shape[0]
        loss = -float(logp[np.arange(n), y].mean())
        delta = np.exp(logp)
        delta[np.arange(n), y] -= 1.0
        delta /= np.float32(n)
        gw: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        gb: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        for k in range(len(self.weights) - 1, -1, -1):
            gw[k] = acts[k].T @ delta
            gb[k] = delta.sum(axis=0)
            if k:
                delta = delta @ self.weights[k].T
                delta *= acts[k] > 0
        return loss, gw, gb


@dataclass
class TrainingRecord:
    epochs: int
    batch_size: int
    lr: float
    seed: int
    losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def fit(net: MLP, x: np.ndarray, y: np.ndarray, *, epochs: int, batch_size: int,
        lr: float, seed: int, val_fraction: float = 0.0) -> TrainingRecord:
    """Minibatch Adam on cross-entropy. Shuffling is driven by ``seed``."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_val = int(len(x) * val_fraction)
    val_idx, tr_idx = order[:n_val], order[n_val:]
    x_val, y_val = x[val_idx], y[val_idx]
    x_tr, y_tr = x[tr_idx], y[tr_idx]

    opt = Adam(lr=lr)
    params = net.weights + net.biases
    rec = TrainingRecord(epochs=epochs, batch_size=batch_size, lr=lr, seed=seed)
    for epoch in range(epochs):
        perm = rng.permutation(len(x_tr))
        total = 0.0
        for bi, start in enumerate(range(0, len(perm), batch_size)):
            idx = perm[start:start + batch_size]
            loss, gw, gb = net.loss_and_grads(x_tr[idx], y_tr[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(lr, epoch, bi)
            opt.step(params, gw + gb)
            total += loss * len(idx)
        rec.losses.append(total / max(len(perm), 1))
        if n_val:
            logp = log_softmax(net.forward(x_val))
            vl = -float(logp[np.arange(n_val), y_val].mean())
            if not math.isfinite(vl):
                raise TrainingDiverged(lr, epoch, -1)
            rec.val_losses.append(vl)
    return rec
