"""Image <-> latent codec: an exact identity mode and a small convolutional autoencoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import Tensor, avg_pool2, backward, clip, conv2d, no_grad, upsample2

log = logging.getLogger(__name__)

IDENTITY = "identity"
AUTOENCODER = "autoencoder"


@dataclass(frozen=True)
class CodecConfig:
    mode: str = AUTOENCODER
    latent_channels: int = 4
    width: int = 16
    epochs: int = 100
    batch_size: int = 16
    lr: float = 3e-3
    optimizer: str = "adam"
    seed: int = 0


@dataclass(frozen=True)
class CodecParams:
    mode: str
    image_shape: tuple[int, int, int]
    latent_shape: tuple[int, int, int]
    weights: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    latent_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in (IDENTITY, AUTOENCODER):
            raise ValueError(f"unknown codec mode {self.mode!r}")
        if self.mode == IDENTITY and self.latent_shape != self.image_shape:
            raise ValueError("identity codec needs latent shape == image shape")
        nn.check_finite(self.weights, "codec")

    @classmethod
    def identity(cls, image_shape=(1, 16, 16)) -> "CodecParams":
        return cls(IDENTITY, tuple(image_shape), tuple(image_shape))

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        meta = {
            "kind": "codec",
            "mode": self.mode,
            "image_shape": list(self.image_shape),
            "latent_shape": list(self.latent_shape),
            "latent_scale": self.latent_scale,
            "signature": nn.signature(self.weights),
        }
        return dict(self.weights), meta

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> "CodecParams":
        if meta.get("kind") != "codec":
            raise ValueError("checkpoint does not hold codec parameters")
        if meta["signature"] != nn.signature(arrays):
            raise ValueError("codec checkpoint shape signature mismatch")
        return cls(meta["mode"], tuple(meta["image_shape"]), tuple(meta["latent_shape"]), arrays, meta["latent_scale"])


def init_codec(cfg: CodecConfig, image_shape=(1, 16, 16)) -> CodecParams:
    if cfg.mode == IDENTITY:
        return CodecParams.identity(image_shape)
    rng = np.random.default_rng(cfg.seed)
    c, h, w = image_shape
    k, lc = cfg.width, cfg.latent_channels
    weights = {
        "enc1.w": nn.conv_init(rng, k, c), "enc1.b": np.zeros(k),
        "enc2.w": nn.conv_init(rng, k, k), "enc2.b": np.zeros(k),
        "enc3.w": nn.conv_init(rng, lc, k), "enc3.b": np.zeros(lc),
        "dec1.w": nn.conv_init(rng, k, lc), "dec1.b": np.zeros(k),
        "dec2.w": nn.conv_init(rng, k, k), "dec2.b": np.zeros(k),
        "dec3.w": nn.conv_init(rng, c, k), "dec3.b": np.zeros(c),
    }
    return CodecParams(AUTOENCODER, tuple(image_shape), (lc, h // 2, w // 2), weights)


def _batched(x: Tensor, shape: tuple[int, ...], what: str) -> tuple[Tensor, bool]:
    if x.shape == shape:
        return x.reshape((1, *shape)), True
    if x.ndim == 4 and x.shape[1:] == shape:
        return x, False
    raise ValueError(f"{what}: expected shape {shape} (optionally batched), got {x.shape}")


def _encode_raw(x: Tensor, w: dict[str, Tensor]) -> Tensor:
    h = conv2d(x, w["enc1.w"], w["enc1.b"]).relu()
    h = avg_pool2(h)
    h = conv2d(h, w["enc2.w"], w["enc2.b"]).relu()
    return conv2d(h, w["enc3.w"], w["enc3.b"])


def _decode_raw(z: Tensor, w: dict[str, Tensor]) -> Tensor:
    h = conv2d(z, w["dec1.w"], w["dec1.b"]).relu()
    h = upsample2(h)
    h = conv2d(h, w["dec2.w"], w["dec2.b"]).relu()
    return conv2d(h, w["dec3.w"], w["dec3.b"]).sigmoid()


def _leaves(params: CodecParams, weights: dict | None = None) -> dict[str, Tensor]:
    src = params.weights if weights is None else weights
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in src.items()}


def encode(x: Tensor, params: CodecParams) -> Tensor:
    xb, single = _batched(x, params.image_shape, "encode")
    if xb.data.min() < 0.0 or xb.data.max() > 1.0:
        raise ValueError("encode: image values must lie in [0, 1]")
    if params.mode == IDENTITY:
        return x
    z = _encode_raw(xb, _leaves(params)) * (1.0 / params.latent_scale)
    return z.reshape(params.latent_shape) if single else z


def decode(z: Tensor, params: CodecParams) -> Tensor:
    """Latent to image in [0, 1]; differentiable in ``z``."""
    zb, single = _batched(z, params.latent_shape, "decode")
    if params.mode == IDENTITY:
        return clip(z, 0.0, 1.0)
    x = _decode_raw(zb * params.latent_scale, _leaves(params))
    return x.reshape(params.image_shape) if single else x


def reconstruction_mse(params: CodecParams, images: np.ndarray) -> float:
    with no_grad():
        x = Tensor(images)
        return float(np.mean((decode(encode(x, params), params).data - images) ** 2))


def train_codec(images: np.ndarray, cfg: CodecConfig) -> CodecParams:
    """Fit the autoencoder to ``images`` (N, C, H, W) by pixel MSE.

    After fitting, the latent scale is set to the latent standard deviation so
    encoded latents have roughly unit variance.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("train_codec: empty dataset")
    params = init_codec(cfg, images.shape[1:])
    if cfg.mode == IDENTITY:
        return params
    rng = np.random.default_rng(cfg.seed + 1)
    opt = nn.make_optimizer(cfg.optimizer, cfg.lr)
    weights = dict(params.weights)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(images), cfg.batch_size):
            batch = images[order[start:start + cfg.batch_size]]
            leaves = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
            x = Tensor(batch)
            loss = (_decode_raw(_encode_raw(x, leaves), leaves) - x).square().mean()
            grads = backward(loss)
            weights = opt.step(weights, {k: grads[t].data for k, t in leaves.items()})
            total += loss.item() * len(batch)
        log.info("codec epoch %d loss %.6f", epoch, total / len(images))
    with no_grad():
        lat = _encode_raw(Tensor(images), _leaves(params, weights)).data
    scale = float(lat.std()) or 1.0
    return CodecParams(AUTOENCODER, params.image_shape, params.latent_shape, weights, scale)
