"""On-disk artifacts: model checkpoints, PGM images, comparison strips, manifests."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .codec import CodecParams
from .denoiser import DenoiserParams
from .perceptual import AlignmentParams, PerceptualParams, alignment_from_arrays, perceptual_from_arrays
from .tensor import load_tensors, save_tensors

CHECKPOINTS = {"codec": "codec.gdt", "denoiser": "denoiser.gdt", "perceptual": "perceptual.gdt"}
STRIP_SEPARATOR = 255


class MissingCheckpoint(FileNotFoundError):
    pass


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def checkpoint_path(out_dir: Path, name: str) -> Path:
    return Path(out_dir) / "checkpoints" / CHECKPOINTS[name]


def save_codec(path, params: CodecParams) -> None:
    arrays, meta = params.to_arrays()
    save_tensors(path, arrays, meta)


def save_denoiser(path, params: DenoiserParams) -> None:
    arrays, meta = params.to_arrays()
    save_tensors(path, arrays, meta)


def save_perceptual(path, perceptual: PerceptualParams, alignment: AlignmentParams) -> None:
    pa, pm = perceptual.to_arrays()
    aa, am = alignment.to_arrays()
    arrays = {**{f"lpips/{k}": v for k, v in pa.items()}, **{f"align/{k}": v for k, v in aa.items()}}
    save_tensors(path, arrays, {"kind": "perceptual_bundle", "perceptual": pm, "alignment": am})


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingCheckpoint(f"missing checkpoint: expected {path}")
    return path


def load_codec(path) -> CodecParams:
    return CodecParams.from_arrays(*load_tensors(_require(Path(path))))


def load_denoiser(path) -> DenoiserParams:
    return DenoiserParams.from_arrays(*load_tensors(_require(Path(path))))


def load_perceptual(path) -> tuple[PerceptualParams, AlignmentParams]:
    arrays, meta = load_tensors(_require(Path(path)))
    if meta.get("kind") != "perceptual_bundle":
        raise ValueError(f"{path}: not a perceptual checkpoint")
    split: dict[str, dict] = {"lpips": {}, "align": {}}
    for k, v in arrays.items():
        prefix, _, name = k.partition("/")
        split[prefix][name] = v
    return (
        perceptual_from_arrays(split["lpips"], meta["perceptual"]),
        alignment_from_arrays(split["align"], meta["alignment"]),
    )


# -- images -----------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantise a [0, 1] image (optionally with a leading channel axis) to 8 bits."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[0]
    if arr.dtype == np.uint8:
        return arr
    arr = arr.astype(np.float64)
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Binary 8-bit PGM (P5). Float images in [0, 1] are quantised here."""
    arr = to_uint8(img)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5" or tokens[3] != "255":
        raise ValueError(f"{path}: only 8-bit binary PGM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1:pos + 1 + w * h]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def comparison_strip(images) -> np.ndarray:
    """Images side by side with a one-pixel white column between neighbours."""
    tiles = [to_uint8(img) for img in images]
    h = tiles[0].shape[0]
    sep = np.full((h, 1), STRIP_SEPARATOR, dtype=np.uint8)
    parts = []
    for i, tile in enumerate(tiles):
        if i:
            parts.append(sep)
        parts.append(tile)
    return np.concatenate(parts, axis=1)


# -- transactional writes ---------------------------------------------------------------


class ArtifactWriter:
    """Track files written inside a block; remove them all if the block fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def __enter__(self):
        return self

    def path(self, p: str | Path) -> Path:
        p = Path(p)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(p)
        return p

    def text(self, p, content: str) -> Path:
        p = self.path(p)
        p.write_text(content)
        return p

    def json(self, p, obj) -> Path:
        return self.text(p, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            for p in self.paths:
                try:
                    os.remove(p)
                except FileNotFoundError:
                    pass
        return False
