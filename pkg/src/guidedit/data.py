"""Procedural toy image corpus: one shape per image, described by a discrete prompt."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prompts import INTENSITIES, POSITIONS, SHAPES, Prompt

# quadrant centres as (row, col) in pixel-centre coordinates for a 16x16 canvas
_QUADRANT_CENTRES = {"nw": (0.25, 0.25), "ne": (0.25, 0.75), "sw": (0.75, 0.25), "se": (0.75, 0.75)}
_LEVELS = {"low": 0.4, "mid": 0.7, "high": 1.0}


@dataclass(frozen=True)
class DatasetSpec:
    size: int = 16
    samples_per_combination: int = 4
    jitter: float = 0.05
    background: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_combination < 1:
            raise ValueError("degenerate dataset: samples_per_combination must be >= 1")
        if self.size < 8 or self.size % 4:
            raise ValueError(f"image size must be a multiple of 4 and >= 8, got {self.size}")
        if not 0.0 <= self.jitter <= 0.5:
            raise ValueError(f"jitter must be in [0, 0.5], got {self.jitter}")

    @property
    def combinations(self) -> int:
        return len(SHAPES) * len(POSITIONS) * len(INTENSITIES)

    def __len__(self) -> int:
        return self.combinations * self.samples_per_combination


def shape_mask(shape: str, position: str, size: int = 16) -> np.ndarray:
    """Boolean foreground mask of a shape centred in a quadrant."""
    fy, fx = _QUADRANT_CENTRES[position]
    cy, cx = fy * size - 0.5, fx * size - 0.5
    r = size * 0.2  # 3.2 px at 16x16
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if shape == "cross":
        arm = r * 0.35
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def render(prompt: Prompt, spec: DatasetSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Rasterise ``prompt`` into a (1, size, size) image in [0, 1]."""
    if prompt.is_null():
        raise ValueError("cannot render the null prompt")
    shape, position, level = prompt.names()
    img = np.full((spec.size, spec.size), spec.background)
    img[shape_mask(shape, position, spec.size)] = _LEVELS[level]
    if rng is not None and spec.jitter > 0:
        img = img + rng.uniform(-spec.jitter, spec.jitter, size=img.shape)
    return np.clip(img, 0.0, 1.0)[None]


def prompt_at(index: int, spec: DatasetSpec) -> Prompt:
    combo = (index // spec.samples_per_combination) % spec.combinations
    s, rest = divmod(combo, len(POSITIONS) * len(INTENSITIES))
    p, i = divmod(rest, len(INTENSITIES))
    return Prompt(s + 1, p + 1, i + 1)


def sample(index: int, spec: DatasetSpec) -> tuple[np.ndarray, Prompt]:
    """The ``index``-th sample; reproducible from ``(spec, index)`` alone."""
    if not 0 <= index < len(spec):
        raise IndexError(f"sample index {index} outside [0, {len(spec)})")
    prompt = prompt_at(index, spec)
    rng = np.random.default_rng([spec.seed, index])
    return render(prompt, spec, rng), prompt


def generate_dataset(spec: DatasetSpec) -> list[tuple[np.ndarray, Prompt]]:
    return [sample(i, spec) for i in range(len(spec))]


def stack_images(items) -> np.ndarray:
    return np.stack([img for img, _ in items])
