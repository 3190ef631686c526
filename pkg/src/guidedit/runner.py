"""Orchestration shared by the CLI and the end-to-end tests."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from . import artifacts
from .artifacts import ArtifactWriter, checkpoint_path
from .codec import CodecParams, encode, train_codec
from .config import RunConfig
from .data import generate_dataset, stack_images
from .denoiser import train_denoiser
from .perceptual import train_perceptual
from .pipeline import MODES, EditResult, Models, detail_csv, diagnostics_csv, edit_batch, edit_pairs
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

COMPONENTS = ("codec", "denoiser", "perceptual")


def encode_dataset(codec: CodecParams, dataset) -> list[tuple[np.ndarray, object]]:
    with no_grad():
        lat = encode(Tensor(stack_images(dataset)), codec).data
    return [(z, p) for z, (_, p) in zip(lat, dataset)]


def train(cfg: RunConfig, component: str = "all", out_dir: Path | None = None) -> dict[str, Path]:
    """Train the requested component(s) and write checkpoints plus a manifest.

    The denoiser trains on codec latents, so training it alone needs an
    existing codec checkpoint.
    """
    if component not in (*COMPONENTS, "all"):
        raise ValueError(f"unknown component {component!r}")
    out_dir = Path(out_dir or cfg.output_dir)
    wanted = COMPONENTS if component == "all" else (component,)
    dataset = generate_dataset(cfg.dataset)
    written: dict[str, Path] = {}
    with ArtifactWriter() as w:
        codec = None
        if "codec" in wanted:
            log.info("training codec")
            codec = train_codec(stack_images(dataset), cfg.codec)
            artifacts.save_codec(w.path(checkpoint_path(out_dir, "codec")), codec)
            written["codec"] = checkpoint_path(out_dir, "codec")
        if "denoiser" in wanted:
            codec = codec or artifacts.load_codec(checkpoint_path(out_dir, "codec"))
            log.info("training denoiser")
            den = train_denoiser(encode_dataset(codec, dataset), cfg.schedule(), cfg.denoiser)
            artifacts.save_denoiser(w.path(checkpoint_path(out_dir, "denoiser")), den)
            written["denoiser"] = checkpoint_path(out_dir, "denoiser")
        if "perceptual" in wanted:
            log.info("training perceptual and alignment models")
            perc, align = train_perceptual(dataset, cfg.perceptual)
            artifacts.save_perceptual(w.path(checkpoint_path(out_dir, "perceptual")), perc, align)
            written["perceptual"] = checkpoint_path(out_dir, "perceptual")
        w.json(out_dir / "checkpoints" / "manifest.json", manifest(cfg, out_dir, "train", component=component))
    return written


def checkpoint_hashes(out_dir: Path) -> dict[str, str]:
    out = {}
    for name in COMPONENTS:
        p = checkpoint_path(out_dir, name)
        if p.exists():
            out[name] = artifacts.sha256_file(p)
    return out


def manifest(cfg: RunConfig, out_dir: Path, command: str, **extra) -> dict:
    return {
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "checkpoints": checkpoint_hashes(out_dir),
        **extra,
    }


def load_models(cfg: RunConfig, out_dir: Path | None = None, need: Sequence[str] = COMPONENTS) -> Models:
    out_dir = Path(out_dir or cfg.output_dir)
    codec = artifacts.load_codec(checkpoint_path(out_dir, "codec"))
    den = artifacts.load_denoiser(checkpoint_path(out_dir, "denoiser")) if "denoiser" in need else None
    perc = align = None
    if "perceptual" in need:
        perc, align = artifacts.load_perceptual(checkpoint_path(out_dir, "perceptual"))
    return Models(cfg.schedule(), den, codec, perc, align)


def result_key(r: EditResult) -> str:
    def slug(p):
        return str(p).replace(",", "-").replace("<", "").replace(">", "")

    return f"s{r.seed}_i{r.index}_{slug(r.src_prompt)}_to_{slug(r.edit_prompt)}"


def write_result(w: ArtifactWriter, root: Path, r: EditResult) -> Path:
    d = Path(root) / "edits" / result_key(r) / r.mode
    artifacts.write_pgm(w.path(d / "source.pgm"), r.source)
    artifacts.write_pgm(w.path(d / "edited.pgm"), r.edited)
    w.text(d / "diagnostics.csv", diagnostics_csv(r))
    w.text(d / "result.csv", detail_csv([r]))
    return d


def run_eval_batch(cfg: RunConfig, models: Models, modes: Sequence[str] = MODES) -> dict[str, list[EditResult]]:
    """The standard batch: ``pipeline.eval_pairs`` single-attribute edits under each mode."""
    pcfg = cfg.pipeline
    pairs = edit_pairs(pcfg.eval_pairs, cfg.dataset, pcfg.edit_slots, pcfg.eval_seed)
    xs = np.stack([p[0] for p in pairs])
    return edit_batch(
        xs, [p[1] for p in pairs], [p[2] for p in pairs], models, cfg.guidance, modes, pcfg,
        seeds=[pcfg.eval_seed] * len(pairs), indices=[p[3] for p in pairs],
    )
