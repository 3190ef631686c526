"""Conditional noise predictor eps(z_t, E, t) and its DDPM training loop.

The network is a small residual U-shaped conv net over the latent grid with
two average-pool downsampling stages. A conditioning vector, built from a
sinusoidal timestep embedding concatenated with the prompt embedding, drives a
per-block FiLM modulation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .prompts import VOCAB, Prompt, one_hot
from .schedule import NoiseSchedule
from .tensor import Tensor, avg_pool2, backward, concat, conv2d, film, linear, no_grad, upsample2

log = logging.getLogger(__name__)

BLOCKS = ("down1", "down2", "mid", "up2", "up1")
TIME_DIM = 16


@dataclass(frozen=True)
class DenoiserConfig:
    width: int = 32
    embed_dim: int = 16
    cond_dim: int = 64
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    p_null: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class DenoiserParams:
    latent_shape: tuple[int, int, int]
    T: int
    weights: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        nn.check_finite(self.weights, "denoiser")

    def to_arrays(self):
        meta = {
            "kind": "denoiser",
            "latent_shape": list(self.latent_shape),
            "T": self.T,
            "signature": nn.signature(self.weights),
        }
        return dict(self.weights), meta

    @classmethod
    def from_arrays(cls, arrays, meta) -> "DenoiserParams":
        if meta.get("kind") != "denoiser":
            raise ValueError("checkpoint does not hold denoiser parameters")
        if meta["signature"] != nn.signature(arrays):
            raise ValueError("denoiser checkpoint shape signature mismatch")
        return cls(tuple(meta["latent_shape"]), meta["T"], arrays)


def init_denoiser(cfg: DenoiserConfig, latent_shape=(4, 8, 8), T: int = 1000) -> DenoiserParams:
    rng = np.random.default_rng(cfg.seed)
    c, k, d = latent_shape[0], cfg.width, cfg.embed_dim
    w: dict[str, np.ndarray] = {}
    for slot, vocab in enumerate(VOCAB):
        w[f"emb.table{slot}"] = rng.normal(0.0, 1.0, size=(vocab, d))
    w["emb.w"] = nn.linear_init(rng, d, d) * 0.5
    w["emb.b"] = np.zeros(d)
    w["cond.w"] = nn.linear_init(rng, TIME_DIM + d, cfg.cond_dim) * 0.5
    w["cond.b"] = np.zeros(cfg.cond_dim)
    w["in.w"] = nn.conv_init(rng, k, c)
    w["in.b"] = np.zeros(k)
    for name in BLOCKS:
        w[f"{name}.film.w"] = nn.linear_init(rng, cfg.cond_dim, 2 * k) * 0.1
        w[f"{name}.film.b"] = np.zeros(2 * k)
        w[f"{name}.conv1.w"] = nn.conv_init(rng, k, k)
        w[f"{name}.conv1.b"] = np.zeros(k)
        w[f"{name}.conv2.w"] = nn.conv_init(rng, k, k) * 0.1
        w[f"{name}.conv2.b"] = np.zeros(k)
    w["out.w"] = nn.conv_init(rng, c, k) * 0.1
    w["out.b"] = np.zeros(c)
    return DenoiserParams(tuple(latent_shape), T, w)


def timestep_embedding(t: np.ndarray, dim: int = TIME_DIM) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _leaves(params: DenoiserParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.weights.items()}


def _embed(prompts, w) -> Tensor:
    h = None
    for slot in range(len(VOCAB)):
        rows = Tensor(one_hot(prompts, slot)) @ w[f"emb.table{slot}"]
        h = rows if h is None else h + rows
    return linear(h, w["emb.w"], w["emb.b"])


def embed(p: Prompt, params: DenoiserParams) -> np.ndarray:
    """Prompt embedding vector (d_e,); the all-zero prompt gives the null embedding."""
    p.validate()
    with no_grad():
        return _embed([p], _leaves(params)).data[0]


def embed_many(prompts, params: DenoiserParams) -> np.ndarray:
    for p in prompts:
        p.validate()
    with no_grad():
        return _embed(list(prompts), _leaves(params)).data


def _block(x: Tensor, cond: Tensor, name: str, w) -> Tensor:
    k = x.shape[1]
    mod = linear(cond, w[f"{name}.film.w"], w[f"{name}.film.b"])
    h = conv2d(x.relu(), w[f"{name}.conv1.w"], w[f"{name}.conv1.b"])
    h = film(h, mod[:, :k], mod[:, k:])
    h = conv2d(h.relu(), w[f"{name}.conv2.w"], w[f"{name}.conv2.b"])
    return x + h


def _forward(z: Tensor, emb: Tensor, t: np.ndarray, w) -> Tensor:
    temb = Tensor(timestep_embedding(t))
    cond = linear(concat([temb, emb], axis=1), w["cond.w"], w["cond.b"]).tanh()
    x0 = conv2d(z, w["in.w"], w["in.b"])
    a = _block(x0, cond, "down1", w)
    b = _block(avg_pool2(a), cond, "down2", w)
    m = _block(avg_pool2(b), cond, "mid", w)
    u2 = _block(upsample2(m) + b, cond, "up2", w)
    u1 = _block(upsample2(u2) + a, cond, "up1", w)
    return conv2d(u1.relu(), w["out.w"], w["out.b"])


def predict_noise(zt: Tensor, e, t, params: DenoiserParams) -> Tensor:
    """Noise prediction with the shape of ``zt``.

    ``zt`` is one latent or a batch; ``e`` the matching embedding(s); ``t`` an
    int or one timestep per batch row.
    """
    single = zt.shape == params.latent_shape
    if single:
        zt = zt.reshape((1, *zt.shape))
    elif zt.ndim != 4 or zt.shape[1:] != params.latent_shape:
        raise ValueError(f"predict_noise: latent shape {zt.shape} does not match {params.latent_shape}")
    n = zt.shape[0]
    emb = np.asarray(e.data if isinstance(e, Tensor) else e, dtype=np.float64).reshape(n, -1)
    ts = np.broadcast_to(np.asarray(t), (n,))
    if (ts < 0).any() or (ts >= params.T).any():
        raise IndexError(f"timestep outside [0, {params.T})")
    with no_grad():
        out = _forward(zt, Tensor(emb), ts, _leaves(params))
    return out.reshape(params.latent_shape) if single else out


def predict_noise_prompts(zt: Tensor, prompts, t, params: DenoiserParams) -> Tensor:
    return predict_noise(zt, embed_many(prompts, params), t, params)


def _noised(z0: np.ndarray, eps: np.ndarray, t: np.ndarray, alpha_bar: np.ndarray) -> np.ndarray:
    a = alpha_bar[t][:, None, None, None]
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps


def eval_loss(params: DenoiserParams, latents: np.ndarray, prompts, sched: NoiseSchedule, seed: int = 123) -> float:
    """Mean squared noise-prediction error on a fixed random draw of (t, eps)."""
    rng = np.random.default_rng(seed)
    t = rng.integers(0, sched.T, size=len(latents))
    eps = rng.standard_normal(latents.shape)
    with no_grad():
        zt = Tensor(_noised(latents, eps, t, sched.alpha_bar))
        pred = _forward(zt, _embed(list(prompts), _leaves(params)), t, _leaves(params))
    return float(np.mean((pred.data - eps) ** 2))


def train_denoiser(dataset, sched: NoiseSchedule, cfg: DenoiserConfig, history: list | None = None) -> DenoiserParams:
    """Minimise the DDPM epsilon objective with null-prompt dropout.

    ``dataset`` is a sequence of ``(latent, Prompt)`` pairs. Per-epoch mean
    losses are appended to ``history`` when given.
    """
    if len(dataset) == 0:
        raise ValueError("train_denoiser: empty dataset")
    latents = np.stack([np.asarray(z, dtype=np.float64) for z, _ in dataset])
    prompts = [p for _, p in dataset]
    params = init_denoiser(cfg, latents.shape[1:], sched.T)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = nn.make_optimizer(cfg.optimizer, cfg.lr)
    weights = dict(params.weights)
    null = Prompt.null()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(latents))
        total = 0.0
        for start in range(0, len(latents), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            n = len(idx)
            t = rng.integers(0, sched.T, size=n)
            eps = rng.standard_normal((n, *latents.shape[1:]))
            drop = rng.random(n) < cfg.p_null
            batch_prompts = [null if d else prompts[i] for i, d in zip(idx, drop)]
            leaves = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
            zt = Tensor(_noised(latents[idx], eps, t, sched.alpha_bar))
            pred = _forward(zt, _embed(batch_prompts, leaves), t, leaves)
            loss = (pred - Tensor(eps)).square().mean()
            grads = backward(loss)
            weights = opt.step(weights, {k: grads[v].data for k, v in leaves.items()})
            total += loss.item() * n
        mean = total / len(latents)
        if history is not None:
            history.append(mean)
        if epoch % 10 == 0 or epoch == cfg.epochs - 1:
            log.info("denoiser epoch %d loss %.5f", epoch, mean)
    return DenoiserParams(params.latent_shape, sched.T, weights)
