"""Learned perceptual distance, PSNR, and a two-tower prompt-alignment score.

The perceptual distance follows the LPIPS recipe on a toy trunk: features from
three conv stages are unit-normalised across channels at each location, their
squared differences are weighted per channel (a 1x1 convolution with
non-negative weights), averaged over space, and summed over stages.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .prompts import VOCAB, Prompt, one_hot
from .tensor import Tensor, avg_pool2, backward, conv2d, l2_normalize, linear, log_softmax, no_grad

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
STAGE_WIDTHS = (8, 16, 32)
FEATURE_EPS = 1e-10


@dataclass(frozen=True)
class PerceptualConfig:
    trunk: str = "trained"  # or "random": fixed random features, for ablation
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-3
    align_epochs: int = 150
    align_dim: int = 16
    temperature: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class PerceptualParams:
    weights: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        nn.check_finite(self.weights, "perceptual")
        for s in range(len(STAGE_WIDTHS)):
            if (self.weights[f"lin{s}"] < 0).any():
                raise ValueError("perceptual channel weights must be non-negative")

    def to_arrays(self):
        return dict(self.weights), {"kind": "perceptual", "signature": nn.signature(self.weights)}


@dataclass(frozen=True)
class AlignmentParams:
    weights: dict[str, np.ndarray] = field(repr=False)
    trained: bool = True

    def __post_init__(self):
        nn.check_finite(self.weights, "alignment")

    def to_arrays(self):
        meta = {"kind": "alignment", "trained": self.trained, "signature": nn.signature(self.weights)}
        return dict(self.weights), meta


def perceptual_from_arrays(arrays, meta) -> PerceptualParams:
    if meta.get("kind") != "perceptual" or meta["signature"] != nn.signature(arrays):
        raise ValueError("checkpoint does not hold matching perceptual parameters")
    return PerceptualParams(arrays)


def alignment_from_arrays(arrays, meta) -> AlignmentParams:
    if meta.get("kind") != "alignment" or meta["signature"] != nn.signature(arrays):
        raise ValueError("checkpoint does not hold matching alignment parameters")
    return AlignmentParams(arrays, meta["trained"])


# -- perceptual trunk ----------------------------------------------------------


def init_perceptual(seed: int = 0, channels: int = 1, size: int = 16) -> PerceptualParams:
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    c_in = channels
    for s, c in enumerate(STAGE_WIDTHS):
        w[f"conv{s}.w"] = nn.conv_init(rng, c, c_in)
        w[f"conv{s}.b"] = np.zeros(c)
        w[f"lin{s}"] = np.ones((1, c, 1, 1))
        c_in = c
    flat = STAGE_WIDTHS[-1] * (size // 4) ** 2
    w["head.w"] = nn.linear_init(rng, flat, sum(VOCAB) - 3) * 0.1
    w["head.b"] = np.zeros(sum(VOCAB) - 3)
    return PerceptualParams(w)


def _features(x: Tensor, w) -> list[Tensor]:
    feats = []
    h = x
    for s in range(len(STAGE_WIDTHS)):
        if s:
            h = avg_pool2(h)
        h = conv2d(h, w[f"conv{s}.w"], w[f"conv{s}.b"]).relu()
        feats.append(h)
    return feats


def _check_image_pair(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ValueError(f"perceptual_distance: shapes {x.shape} and {y.shape} differ")
    for t in (x, y):
        if t.data.min() < 0.0 or t.data.max() > 1.0:
            raise ValueError("perceptual_distance: pixel values must lie in [0, 1]")


def perceptual_distance_batch(x: Tensor, y: Tensor, params: PerceptualParams) -> Tensor:
    """Per-sample distances, shape (N,), for NCHW batches. Differentiable in both inputs."""
    _check_image_pair(x, y)
    w = {k: Tensor(v) for k, v in params.weights.items()}
    n = x.shape[0]
    total = None
    for s, (fx, fy) in enumerate(zip(_features(x, w), _features(y, w))):
        diff = l2_normalize(fx, axis=1, eps=FEATURE_EPS) - l2_normalize(fy, axis=1, eps=FEATURE_EPS)
        per_pixel = conv2d(diff.square(), w[f"lin{s}"])  # (N, 1, H, W)
        stage = per_pixel.reshape(n, -1).mean(axis=1)
        total = stage if total is None else total + stage
    return total


def perceptual_distance(x: Tensor, y: Tensor, params: PerceptualParams) -> float:
    """Distance between two single images (C, H, W); lower means more similar."""
    if x.ndim == 3:
        x = x.reshape((1, *x.shape))
    if y.ndim == 3:
        y = y.reshape((1, *y.shape))
    with no_grad():
        return perceptual_distance_batch(x, y, params).item()


def _classifier_logits(x: Tensor, w) -> Tensor:
    h = _features(x, w)[-1]
    return linear(h.reshape(x.shape[0], -1), w["head.w"], w["head.b"])


def _slot_ce(logits: Tensor, prompts) -> Tensor:
    """Summed cross-entropy over the three attribute heads (null id excluded)."""
    loss = None
    start = 0
    n = logits.shape[0]
    for slot, vocab in enumerate(VOCAB):
        k = vocab - 1
        target = one_hot(prompts, slot)[:, 1:]
        lp = log_softmax(logits[:, start:start + k], axis=1)
        term = (lp * Tensor(target)).sum() * (-1.0 / n)
        loss = term if loss is None else loss + term
        start += k
    return loss


def classify(images: np.ndarray, params: PerceptualParams) -> list[Prompt]:
    with no_grad():
        logits = _classifier_logits(Tensor(images), {k: Tensor(v) for k, v in params.weights.items()}).data
    out = []
    start = 0
    ids = []
    for vocab in VOCAB:
        k = vocab - 1
        ids.append(np.argmax(logits[:, start:start + k], axis=1) + 1)
        start += k
    for row in zip(*ids):
        out.append(Prompt(*(int(i) for i in row)))
    return out


def classifier_accuracy(images: np.ndarray, prompts, params: PerceptualParams) -> float:
    pred = classify(images, params)
    return float(np.mean([p == q for p, q in zip(pred, prompts)]))


# -- alignment two-tower model ---------------------------------------------------


def init_alignment(seed: int = 0, dim: int = 16, channels: int = 1, size: int = 16) -> AlignmentParams:
    rng = np.random.default_rng(seed + 7)
    w = {
        "img.conv0.w": nn.conv_init(rng, 8, channels), "img.conv0.b": np.zeros(8),
        "img.conv1.w": nn.conv_init(rng, 16, 8), "img.conv1.b": np.zeros(16),
        "img.proj.w": nn.linear_init(rng, 16 * (size // 4) ** 2, dim) * 0.1, "img.proj.b": np.zeros(dim),
        "txt.proj.w": nn.linear_init(rng, 32, dim), "txt.proj.b": np.zeros(dim),
    }
    for slot, vocab in enumerate(VOCAB):
        w[f"txt.table{slot}"] = rng.normal(0.0, 1.0, size=(vocab, 32))
    return AlignmentParams(w, trained=False)


def _image_embed(x: Tensor, w) -> Tensor:
    h = conv2d(x, w["img.conv0.w"], w["img.conv0.b"]).relu()
    h = avg_pool2(h)
    h = conv2d(h, w["img.conv1.w"], w["img.conv1.b"]).relu()
    h = avg_pool2(h)
    e = linear(h.reshape(x.shape[0], -1), w["img.proj.w"], w["img.proj.b"])
    return l2_normalize(e, axis=1)


def _prompt_embed(prompts, w) -> Tensor:
    h = None
    for slot in range(len(VOCAB)):
        rows = Tensor(one_hot(prompts, slot)) @ w[f"txt.table{slot}"]
        h = rows if h is None else h + rows
    e = linear(h.relu(), w["txt.proj.w"], w["txt.proj.b"])
    return l2_normalize(e, axis=1)


def embed_images(images: np.ndarray, params: AlignmentParams) -> np.ndarray:
    with no_grad():
        return _image_embed(Tensor(images), {k: Tensor(v) for k, v in params.weights.items()}).data


def embed_prompts(prompts, params: AlignmentParams) -> np.ndarray:
    with no_grad():
        return _prompt_embed(list(prompts), {k: Tensor(v) for k, v in params.weights.items()}).data


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.clip(np.dot(u, v), -1.0, 1.0))


def alignment_score(x: Tensor | np.ndarray, p: Prompt, params: AlignmentParams | None) -> float:
    """Cosine similarity in [-1, 1] between an image and a prompt embedding."""
    if params is None or not params.trained:
        raise ValueError("alignment_score needs trained alignment parameters")
    img = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("alignment_score: pixel values must lie in [0, 1]")
    return cosine(embed_images(img, params)[0], embed_prompts([p], params)[0])


def alignment_scores(images: np.ndarray, prompts, params: AlignmentParams) -> np.ndarray:
    if not params.trained:
        raise ValueError("alignment_score needs trained alignment parameters")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("alignment_score: pixel values must lie in [0, 1]")
    a = embed_images(images, params)
    b = embed_prompts(prompts, params)
    return np.clip(np.sum(a * b, axis=1), -1.0, 1.0)


# -- metrics ---------------------------------------------------------------------


def psnr(x, y, max_value: float = 1.0) -> float:
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    b = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    if max_value <= 0:
        raise ValueError("psnr: max_value must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return 10.0 * math.log10(max_value * max_value / mse)


# -- training ----------------------------------------------------------------------


def _train_classifier(images, prompts, cfg: PerceptualConfig) -> PerceptualParams:
    params = init_perceptual(cfg.seed, images.shape[1], images.shape[2])
    if cfg.trunk == "random":
        return params
    if cfg.trunk != "trained":
        raise ValueError(f"unknown perceptual trunk {cfg.trunk!r}")
    rng = np.random.default_rng(cfg.seed + 1)
    opt = nn.make_optimizer("adam", cfg.lr)
    # channel weights stay fixed at 1; only the trunk and head learn
    trainable = {k: v for k, v in params.weights.items() if not k.startswith("lin")}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(images), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            leaves = {k: Tensor(v, requires_grad=True) for k, v in trainable.items()}
            loss = _slot_ce(_classifier_logits(Tensor(images[idx]), leaves), [prompts[i] for i in idx])
            grads = backward(loss)
            trainable = opt.step(trainable, {k: grads[t].data for k, t in leaves.items()})
            total += loss.item() * len(idx)
        log.info("perceptual classifier epoch %d loss %.4f", epoch, total / len(images))
    return PerceptualParams({**params.weights, **trainable})


def _train_alignment(images, prompts, cfg: PerceptualConfig) -> AlignmentParams:
    params = init_alignment(cfg.seed, cfg.align_dim, images.shape[1], images.shape[2])
    rng = np.random.default_rng(cfg.seed + 2)
    opt = nn.make_optimizer("adam", cfg.lr)
    weights = dict(params.weights)
    groups: dict[Prompt, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(p, []).append(i)
    keys = sorted(groups)
    for epoch in range(cfg.align_epochs):
        # one image per distinct prompt, so every off-diagonal pair is a true negative
        idx = np.array([groups[k][rng.integers(len(groups[k]))] for k in keys])
        leaves = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
        img = _image_embed(Tensor(images[idx]), leaves)
        txt = _prompt_embed(keys, leaves)
        logits = (img @ txt.T) * (1.0 / cfg.temperature)
        eye = Tensor(np.eye(len(keys)))
        n = len(keys)
        loss = ((log_softmax(logits, axis=1) * eye).sum() + (log_softmax(logits, axis=0) * eye).sum()) * (-0.5 / n)
        grads = backward(loss)
        weights = opt.step(weights, {k: grads[t].data for k, t in leaves.items()})
        if epoch % 25 == 0:
            log.info("alignment epoch %d loss %.4f", epoch, loss.item())
    return AlignmentParams(weights, trained=True)


def train_perceptual(dataset, cfg: PerceptualConfig) -> tuple[PerceptualParams, AlignmentParams]:
    """Train the classifier trunk (perceptual features) and the alignment towers."""
    if len(dataset) == 0:
        raise ValueError("train_perceptual: empty dataset")
    images = np.stack([img for img, _ in dataset])
    prompts = [p for _, p in dataset]
    return _train_classifier(images, prompts, cfg), _train_alignment(images, prompts, cfg)


__all__ = [
    "PerceptualConfig",
    "PerceptualParams",
    "AlignmentParams",
    "perceptual_distance",
    "perceptual_distance_batch",
    "psnr",
    "alignment_score",
    "alignment_scores",
    "train_perceptual",
    "init_perceptual",
    "init_alignment",
    "classifier_accuracy",
]
