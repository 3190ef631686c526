"""Noise schedules, forward noising, Tweedie estimates and deterministic DDIM steps.

Every stepping function accepts ``t = -1`` as the virtual step before the
first training step, where the cumulative rate is exactly 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: str
    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def abar(self, t: int) -> float:
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T})")
        return float(self.alpha_bar[t])

    def inference_timesteps(self, steps: int) -> list[int]:
        """Uniformly strided training timesteps, descending (sampling order)."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"inference steps must be in [1, {self.T}], got {steps}")
        stride = self.T // steps
        return [i * stride for i in range(steps)][::-1]


def make_schedule(T: int, kind: str = "linear", beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 <= beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 <= beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    elif kind == "cosine":
        # squared-cosine alpha_bar curve, betas clipped into [beta_min, beta_max]
        s = 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], beta_min, beta_max)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.cumprod(1.0 - beta)
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T=T, kind=kind, beta=beta, alpha_bar=alpha_bar)


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def add_noise(z0: Tensor, eps: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    _same_shape(z0, eps, "add_noise")
    if not 0 <= t < sched.T:
        raise IndexError(f"timestep {t} outside [0, {sched.T})")
    a = sched.abar(t)
    return z0 * math.sqrt(a) + eps * math.sqrt(1.0 - a)


def tweedie_z0(zt: Tensor, eps_pred: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    """Posterior-mean estimate of the clean latent from ``zt`` and a noise prediction."""
    _same_shape(zt, eps_pred, "tweedie_z0")
    a = sched.abar(t)
    if a <= 0.0:
        raise ValueError("degenerate terminal step: alpha_bar is 0")
    return (zt - eps_pred * math.sqrt(1.0 - a)) * (1.0 / math.sqrt(a))


def ddim_step(zt: Tensor, eps_pred: Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> Tensor:
    if t_prev >= t:
        raise ValueError(f"ddim_step goes backwards in time: t_prev={t_prev} >= t={t}")
    a_prev = sched.abar(t_prev)
    if a_prev == sched.abar(t):
        return zt
    z0 = tweedie_z0(zt, eps_pred, t, sched)
    return z0 * math.sqrt(a_prev) + eps_pred * math.sqrt(1.0 - a_prev)


def ddim_invert_step(zt_prev: Tensor, eps_pred: Tensor, t_prev: int, t: int, sched: NoiseSchedule) -> Tensor:
    """Exact algebraic inverse of :func:`ddim_step` for a fixed ``eps_pred``."""
    if t <= t_prev:
        raise ValueError(f"ddim_invert_step goes forwards in time: t={t} <= t_prev={t_prev}")
    _same_shape(zt_prev, eps_pred, "ddim_invert_step")
    a_prev = sched.abar(t_prev)
    a = sched.abar(t)
    if a == a_prev:
        return zt_prev
    z0 = (zt_prev - eps_pred * math.sqrt(1.0 - a_prev)) * (1.0 / math.sqrt(a_prev))
    return z0 * math.sqrt(a) + eps_pred * math.sqrt(1.0 - a)
