"""SGD and AdamW with per-tensor state and non-mutating update previews.

Tensors absent from a step's gradient dict keep their optimizer state
untouched; their per-tensor step counter does not advance either, so a
tensor resuming training after being skipped continues with correct Adam
bias correction.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


class SGD:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError("lr must be positive")
        self.lr = lr
        self.weight_decay = weight_decay

    def peek_delta(self, name: str, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        return -self.lr * (g + self.weight_decay * w)

    def step(self, weights: dict, grads: dict) -> None:
        for name, g in grads.items():
            weights[name] += self.peek_delta(name, weights[name], g)


class AdamW:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError("lr must be positive")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        self.lr = lr
        self.b1, self.b2 = b1, b2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def _moments(self, name: str, g: np.ndarray):
        m = self.m.get(name, 0.0)
        v = self.v.get(name, 0.0)
        t = self.t.get(name, 0) + 1
        m = self.b1 * m + (1.0 - self.b1) * g
        v = self.b2 * v + (1.0 - self.b2) * g * g
        return m, v, t

    def _delta(self, w, m, v, t):
        mhat = m / (1.0 - self.b1**t)
        vhat = v / (1.0 - self.b2**t)
        return -self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * w)

    def peek_delta(self, name: str, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Update the optimizer would apply for this gradient, without applying
        it or advancing any state."""
        m, v, t = self._moments(name, g)
        return self._delta(w, m, v, t)

    def step(self, weights: dict, grads: dict) -> None:
        for name, g in grads.items():
            m, v, t = self._moments(name, g)
            self.m[name], self.v[name], self.t[name] = m, v, t
            weights[name] += self._delta(weights[name], m, v, t)


def make_optimizer(kind: str, **kwargs):
    if kind == "sgd":
        return SGD(**kwargs)
    if kind == "adamw":
        return AdamW(**kwargs)
    raise ConfigError(f"unknown optimizer {kind!r}; expected 'sgd' or 'adamw'")
