"""Three-prediction guidance composition, step gating, and perceptual latent updates.

At each reverse step the denoiser is queried with the null, source and edit
prompts. ``noise_cond`` is ordinary classifier-free guidance toward the source
prompt; the edit term then pushes along ``eps_edit - eps_src`` (source anchor)
or ``eps_edit - eps_null`` (null anchor).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .codec import CodecParams, decode
from .perceptual import PerceptualParams, perceptual_distance_batch
from .schedule import NoiseSchedule, tweedie_z0
from .tensor import ShapeError, Tensor, backward, no_grad

SRC_ANCHOR = "src_anchor"
NULL_ANCHOR = "null_anchor"
MAX_HALVINGS = 5

Range = tuple[int, int] | None


@dataclass(frozen=True)
class GuidanceConfig:
    gamma: float = 7.5
    beta: float = 7.5
    variant: str = SRC_ANCHOR
    text_range: Range = (0, 19)
    perceptual_range: Range = (20, 49)
    lam: float = 0.1
    inner_iters: int = 1
    backtrack: bool = True

    def __post_init__(self):
        for name in ("gamma", "beta", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"guidance.{name} must be >= 0")
        if self.inner_iters < 0:
            raise ValueError("guidance.inner_iters must be >= 0")
        if self.variant not in (SRC_ANCHOR, NULL_ANCHOR):
            raise ValueError(f"guidance.variant must be {SRC_ANCHOR!r} or {NULL_ANCHOR!r}")
        for name in ("text_range", "perceptual_range"):
            r = getattr(self, name)
            if r is not None:
                if len(r) != 2 or r[0] > r[1] or r[0] < 0:
                    raise ValueError(f"guidance.{name} must be an inclusive [lo, hi] interval, got {r}")
                object.__setattr__(self, name, (int(r[0]), int(r[1])))

    def validate_steps(self, inference_steps: int) -> None:
        for name in ("text_range", "perceptual_range"):
            r = getattr(self, name)
            if r is not None and r[1] >= inference_steps:
                raise ValueError(f"guidance.{name} {r} exceeds [0, {inference_steps})")

    @classmethod
    def default_for(cls, inference_steps: int, **overrides) -> "GuidanceConfig":
        """Text guidance on the first 40% of steps, perceptual on the remaining 60%."""
        split = round(0.4 * inference_steps)
        text = (0, split - 1) if split > 0 else None
        perc = (split, inference_steps - 1) if split < inference_steps else None
        return cls(**{"text_range": text, "perceptual_range": perc, **overrides})


class Gate(NamedTuple):
    text_active: bool
    perceptual_active: bool


def _in(step: int, r: Range) -> bool:
    return r is not None and r[0] <= step <= r[1]


def gate(step_index: int, cfg: GuidanceConfig) -> Gate:
    return Gate(_in(step_index, cfg.text_range), _in(step_index, cfg.perceptual_range))


def _check3(a: Tensor, b: Tensor, c: Tensor) -> None:
    if not a.shape == b.shape == c.shape:
        raise ShapeError(f"guidance: prediction shapes {a.shape}, {b.shape}, {c.shape} differ")


def noise_cond(eps_null: Tensor, eps_src: Tensor, gamma: float) -> Tensor:
    """Classifier-free guidance toward the source prompt.

    Written as ``(1 - g) * eps_null + g * eps_src`` so that ``g = 1`` returns
    ``eps_src`` bit-exactly.
    """
    if eps_null.shape != eps_src.shape:
        raise ShapeError(f"guidance: prediction shapes {eps_null.shape} and {eps_src.shape} differ")
    return eps_null * (1.0 - gamma) + eps_src * gamma


def compose_src_anchor(eps_null: Tensor, eps_src: Tensor, eps_edit: Tensor, gamma: float, beta: float) -> Tensor:
    _check3(eps_null, eps_src, eps_edit)
    return noise_cond(eps_null, eps_src, gamma) + (eps_edit - eps_src) * beta


def compose_null_anchor(eps_null: Tensor, eps_src: Tensor, eps_edit: Tensor, gamma: float, beta: float) -> Tensor:
    _check3(eps_null, eps_src, eps_edit)
    return noise_cond(eps_null, eps_src, gamma) + (eps_edit - eps_null) * beta


def compose(eps_null: Tensor, eps_src: Tensor, eps_edit: Tensor, cfg: GuidanceConfig) -> Tensor:
    fn = compose_src_anchor if cfg.variant == SRC_ANCHOR else compose_null_anchor
    return fn(eps_null, eps_src, eps_edit, cfg.gamma, cfg.beta)


def perceptual_objective(
    zt: Tensor, t: int, eps_pred: Tensor, x_src: Tensor,
    codec: CodecParams, perceptual: PerceptualParams, sched: NoiseSchedule,
) -> Tensor:
    """Per-sample distance between the decoded Tweedie estimate and the source image."""
    if zt.ndim == 3:
        zt, eps_pred, x_src = (a.reshape((1, *a.shape)) for a in (zt, eps_pred, x_src))
    return perceptual_distance_batch(decode(tweedie_z0(zt, eps_pred, t, sched), codec), x_src, perceptual)


def perceptual_update(
    zt: Tensor, t: int, eps_pred: Tensor, x_src: Tensor,
    codec: CodecParams, perceptual: PerceptualParams, sched: NoiseSchedule, cfg: GuidanceConfig,
    diagnostics: list | None = None,
) -> Tensor:
    """Gradient steps on ``zt`` pulling the decoded clean estimate toward ``x_src``.

    Works on batches (N, C, H, W) with independent per-sample step sizes;
    ``eps_pred`` stays fixed throughout. With ``cfg.backtrack`` a step that
    does not lower the objective is retried at half the step size, up to
    five times, and dropped if it still fails.
    """
    if cfg.lam == 0.0 or cfg.inner_iters == 0:
        return zt
    orig = zt
    single = zt.ndim == 3
    if single:
        zt, eps_pred, x_src = (a.reshape((1, *a.shape)) for a in (zt, eps_pred, x_src))

    def loss(z: np.ndarray) -> Tensor:
        return perceptual_objective(Tensor(z), t, eps_pred, x_src, codec, perceptual, sched)

    z = zt.data
    n = z.shape[0]
    record = {"t": t, "before": None, "after": None, "aborted": False}
    try:
        for _ in range(cfg.inner_iters):
            leaf = Tensor(z, requires_grad=True)
            cur = perceptual_objective(leaf, t, eps_pred, x_src, codec, perceptual, sched)
            g = backward(cur.sum())[leaf].data
            if record["before"] is None:
                record["before"] = cur.data.copy()
            if not cfg.backtrack:
                z = z - cfg.lam * g
                continue
            lam = np.full(n, cfg.lam)
            pending = np.ones(n, dtype=bool)
            new = z.copy()
            for _try in range(MAX_HALVINGS + 1):
                cand = z - lam[:, None, None, None] * g
                with no_grad():
                    val = loss(cand).data
                ok = pending & (val < cur.data)
                new[ok] = cand[ok]
                pending &= ~ok
                if not pending.any():
                    break
                lam = np.where(pending, lam * 0.5, lam)
            z = new
        with no_grad():
            record["after"] = loss(z).data.copy()
    except FloatingPointError:
        record["aborted"] = True
        if diagnostics is not None:
            diagnostics.append(record)
        return orig
    if diagnostics is not None:
        diagnostics.append(record)
    out = Tensor(z)
    return out.reshape(out.shape[1:]) if single else out


def objective_value(zt, t, eps_pred, x_src, codec, perceptual, sched) -> np.ndarray:
    with no_grad():
        return perceptual_objective(zt, t, eps_pred, x_src, codec, perceptual, sched).data

