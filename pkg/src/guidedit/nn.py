"""Parameter initialisation and first-order optimisers over dicts of arrays."""

from __future__ import annotations

from typing import Mapping

import numpy as np

Params = dict[str, np.ndarray]


def conv_init(rng: np.random.Generator, c_out: int, c_in: int, k: int = 3) -> np.ndarray:
    fan_in = c_in * k * k
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k))


def linear_init(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / n_in)
    return rng.uniform(-bound, bound, size=(n_in, n_out))


def check_finite(params: Mapping[str, np.ndarray], what: str) -> None:
    for name, arr in params.items():
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"{what}: parameter {name!r} is not finite")


def signature(params: Mapping[str, np.ndarray]) -> dict[str, list[int]]:
    return {k: list(v.shape) for k, v in sorted(params.items())}


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> Params:
        return {k: v - self.lr * grads[k] if k in grads else v for k, v in params.items()}


class Adam:
    """Adam with bias correction; state is kept per parameter name."""

    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: Params = {}
        self.v: Params = {}
        self.t = 0

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> Params:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            m = self.m.get(k, 0.0) * self.b1 + (1.0 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1.0 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")
