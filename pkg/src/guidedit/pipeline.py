"""DDIM inversion, guided reverse sampling under the three editing modes, and metrics."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codec import CodecParams, decode, encode
from .data import DatasetSpec, sample
from .denoiser import DenoiserParams, embed_many, predict_noise
from .guidance import GuidanceConfig, compose, gate, noise_cond, perceptual_update
from .perceptual import AlignmentParams, PerceptualParams, alignment_scores, perceptual_distance_batch, psnr
from .prompts import VOCAB, Prompt
from .schedule import NoiseSchedule, ddim_invert_step, ddim_step
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

NULL_TEXT = "null_text"
TEXT_OPT = "text_opt"
TEXT_OPT_PERCEPTUAL = "text_opt_plus_perceptual"
MODES = (NULL_TEXT, TEXT_OPT, TEXT_OPT_PERCEPTUAL)
SUMMARY_FIELDS = ("mode", "n", "psnr_mean", "perceptual_mean", "alignment_mean")
DETAIL_FIELDS = ("seed", "index", "src_prompt", "edit_prompt", "mode", "psnr", "perceptual", "alignment")


@dataclass(frozen=True)
class PipelineConfig:
    inference_steps: int = 50
    inversion: str = "source"  # source | null | guided
    inversion_gamma: float = 1.0
    perceptual_order: str = "before"  # perceptual update before or after the DDIM step
    retain_trajectory: bool = False
    eval_pairs: int = 30
    eval_seed: int = 1000
    edit_slots: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.inversion not in ("source", "null", "guided"):
            raise ValueError(f"pipeline.inversion must be source, null or guided, got {self.inversion!r}")
        if self.perceptual_order not in ("before", "after"):
            raise ValueError("pipeline.perceptual_order must be 'before' or 'after'")
        if self.inference_steps < 1:
            raise ValueError("pipeline.inference_steps must be >= 1")
        object.__setattr__(self, "edit_slots", tuple(int(s) for s in self.edit_slots))
        if not self.edit_slots or any(s not in range(len(VOCAB)) for s in self.edit_slots):
            raise ValueError(f"pipeline.edit_slots must be a non-empty subset of {list(range(len(VOCAB)))}")


@dataclass(frozen=True)
class Models:
    sched: NoiseSchedule
    denoiser: DenoiserParams | None
    codec: CodecParams
    perceptual: PerceptualParams | None = None
    alignment: AlignmentParams | None = None

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ValueError(f"untrained models: {', '.join(missing)}")


@dataclass
class EditResult:
    source: np.ndarray
    edited: np.ndarray
    src_prompt: Prompt
    edit_prompt: Prompt
    mode: str
    psnr: float
    perceptual: float
    alignment: float
    diagnostics: list[dict] = field(default_factory=list)
    trajectory: list[np.ndarray] | None = None
    seed: int = 0
    index: int = -1

    def row(self) -> dict:
        return {
            "seed": self.seed,
            "index": self.index,
            "src_prompt": str(self.src_prompt),
            "edit_prompt": str(self.edit_prompt),
            "mode": self.mode,
            "psnr": repr(float(self.psnr)),
            "perceptual": repr(float(self.perceptual)),
            "alignment": repr(float(self.alignment)),
        }


def _as_batch(x) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return arr[None] if arr.ndim == 3 else arr


def _eps(models: Models, z: Tensor, prompts: Sequence[Prompt], t: int) -> Tensor:
    return predict_noise(z, embed_many(prompts, models.denoiser), t, models.denoiser)


def invert(x_src, p_src, models: Models, cfg: PipelineConfig) -> list[np.ndarray]:
    """Latent trajectory from the clean encoding up to the noisiest inference step.

    Entry 0 is the encoded image; entry ``k`` is the latent at the ``k``-th
    inference timestep in increasing-noise order. ``x_src`` may be one image or
    a batch, with ``p_src`` one prompt or a matching list.
    """
    models.require("denoiser")
    xs = _as_batch(x_src)
    srcs = [p_src] * len(xs) if isinstance(p_src, Prompt) else list(p_src)
    nulls = [Prompt.null()] * len(xs)
    timesteps = models.sched.inference_timesteps(cfg.inference_steps)[::-1]
    with no_grad():
        z = encode(Tensor(xs), models.codec)
        traj = [z.data]
        t_prev = -1
        for t in timesteps:
            if cfg.inversion == "source":
                eps = _eps(models, z, srcs, t)
            elif cfg.inversion == "null":
                eps = _eps(models, z, nulls, t)
            else:
                eps = noise_cond(_eps(models, z, nulls, t), _eps(models, z, srcs, t), cfg.inversion_gamma)
            z = ddim_invert_step(z, eps, t_prev, t, models.sched)
            traj.append(z.data)
            t_prev = t
    return traj


def _step_pairs(sched: NoiseSchedule, steps: int) -> list[tuple[int, int]]:
    ts = sched.inference_timesteps(steps)
    return list(zip(ts, ts[1:] + [-1]))


def reconstruct(x_src, p_src, models: Models, cfg: PipelineConfig) -> np.ndarray:
    """Invert, then resample with the same source conditioning and no guidance."""
    xs = _as_batch(x_src)
    srcs = [p_src] * len(xs) if isinstance(p_src, Prompt) else list(p_src)
    z = Tensor(invert(xs, srcs, models, cfg)[-1])
    with no_grad():
        for t, t_prev in _step_pairs(models.sched, cfg.inference_steps):
            z = ddim_step(z, _eps(models, z, srcs, t), t, t_prev, models.sched)
        return decode(z, models.codec).data


def sample_edit(z_T, xs, srcs, edits, models: Models, guidance: GuidanceConfig, mode: str, cfg: PipelineConfig):
    """Guided reverse sampling from inverted latents ``z_T``.

    Returns (final images, per-step diagnostics, trajectory or None).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    guidance.validate_steps(cfg.inference_steps)
    n = len(xs)
    nulls = [Prompt.null()] * n
    x_src = Tensor(xs)
    z = Tensor(z_T)
    diagnostics: list[dict] = []
    traj = [z.data] if cfg.retain_trajectory else None
    perceptual_on = mode == TEXT_OPT_PERCEPTUAL and guidance.lam > 0 and guidance.inner_iters > 0
    if perceptual_on:
        models.require("perceptual")
    for step, (t, t_prev) in enumerate(_step_pairs(models.sched, cfg.inference_steps)):
        g = gate(step, guidance)
        with no_grad():
            e_null = _eps(models, z, nulls, t)
            e_src = _eps(models, z, srcs, t)
            e_edit = _eps(models, z, edits, t)
        text = g.text_active and mode != NULL_TEXT
        eps = compose(e_null, e_src, e_edit, guidance) if text else noise_cond(e_null, e_src, guidance.gamma)
        record = {"step": step, "t": t, "text_active": text, "perceptual_active": False, "objective": None}
        perc = perceptual_on and g.perceptual_active
        updates: list[dict] = []
        if perc and cfg.perceptual_order == "before":
            z = perceptual_update(z, t, eps, x_src, models.codec, models.perceptual, models.sched, guidance, updates)
        with no_grad():
            z = ddim_step(z, eps, t, t_prev, models.sched)
        if perc and cfg.perceptual_order == "after":
            z = perceptual_update(z, t_prev, eps, x_src, models.codec, models.perceptual, models.sched, guidance,
                                  updates)
        if perc:
            record["perceptual_active"] = True
            last = updates[-1]
            record["objective"] = last["before"] if last["aborted"] or last["after"] is None else last["after"]
        diagnostics.append(record)
        if traj is not None:
            traj.append(z.data)
    with no_grad():
        images = decode(z, models.codec).data
    return images, diagnostics, traj


def _metrics(xs: np.ndarray, images: np.ndarray, edits, models: Models):
    with no_grad():
        dist = perceptual_distance_batch(Tensor(images), Tensor(xs), models.perceptual).data
    align = alignment_scores(images, edits, models.alignment)
    return [psnr(a, b) for a, b in zip(xs, images)], dist, align


def edit_batch(x_src, p_src, p_edit, models: Models, guidance: GuidanceConfig, modes: Sequence[str],
               cfg: PipelineConfig, seeds: Sequence[int] | None = None, indices: Sequence[int] | None = None
               ) -> dict[str, list[EditResult]]:
    """Edit a batch under each of ``modes``, sharing one inversion."""
    models.require("denoiser", "perceptual", "alignment")
    xs = _as_batch(x_src)
    n = len(xs)
    srcs = [p_src] * n if isinstance(p_src, Prompt) else list(p_src)
    edits = [p_edit] * n if isinstance(p_edit, Prompt) else list(p_edit)
    for a, b in zip(srcs, edits):
        if a == b:
            raise ValueError(f"nothing to edit: source and edit prompts are both {a}")
    seeds = list(seeds) if seeds is not None else [0] * n
    indices = list(indices) if indices is not None else [-1] * n
    traj_in = invert(xs, srcs, models, cfg)
    out: dict[str, list[EditResult]] = {}
    for mode in modes:
        images, diags, traj = sample_edit(traj_in[-1], xs, srcs, edits, models, guidance, mode, cfg)
        ps, ds, als = _metrics(xs, images, edits, models)
        results = []
        for i in range(n):
            per_step = [
                {**d, "objective": float("nan") if d["objective"] is None else float(d["objective"][i])}
                for d in diags
            ]
            full_traj = None
            if traj is not None:
                full_traj = [z[i] for z in traj_in] + [z[i] for z in traj[1:]]
            results.append(EditResult(
                source=xs[i], edited=images[i], src_prompt=srcs[i], edit_prompt=edits[i], mode=mode,
                psnr=float(ps[i]), perceptual=float(ds[i]), alignment=float(als[i]),
                diagnostics=per_step, trajectory=full_traj, seed=seeds[i], index=indices[i],
            ))
        out[mode] = results
        log.info("mode %s: psnr %.3f perceptual %.4f alignment %.4f",
                 mode, float(np.mean(ps)), float(np.mean(ds)), float(np.mean(als)))
    return out


def edit(x_src, p_src: Prompt, p_edit: Prompt, models: Models, guidance: GuidanceConfig, mode: str,
         cfg: PipelineConfig | None = None) -> EditResult:
    """Invert ``x_src`` and resample it toward ``p_edit`` under one guidance mode."""
    cfg = cfg or PipelineConfig()
    return edit_batch(x_src, p_src, p_edit, models, guidance, [mode], cfg)[mode][0]


def recompute_metrics(result: EditResult, models: Models) -> tuple[float, float, float]:
    ps, ds, als = _metrics(result.source[None], result.edited[None], [result.edit_prompt], models)
    return float(ps[0]), float(ds[0]), float(als[0])


# -- evaluation set -------------------------------------------------------------------


def edit_pairs(n: int, spec: DatasetSpec, slots: Sequence[int] = (0,), seed: int = 1000):
    """``n`` deterministic single-attribute edit pairs over held-out samples.

    Returns a list of (image, source prompt, edit prompt, sample index).
    """
    held_out = DatasetSpec(spec.size, spec.samples_per_combination, spec.jitter, spec.background, seed)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(held_out))
    pairs = []
    for k in range(n):
        idx = int(order[k % len(order)])
        img, src = sample(idx, held_out)
        slot = int(slots[rng.integers(len(slots))])
        choices = [v for v in range(1, VOCAB[slot]) if v != src[slot]]
        tgt = src.replace_slot(slot, int(choices[rng.integers(len(choices))]))
        pairs.append((img, src, tgt, idx))
    return pairs


# -- metric tables ----------------------------------------------------------------------


def evaluate(results: Sequence[EditResult]) -> list[dict]:
    """Per-mode means in the fixed mode order."""
    if not results:
        raise ValueError("evaluate: no results")
    return summarize_rows([
        {"mode": r.mode, "psnr": r.psnr, "perceptual": r.perceptual, "alignment": r.alignment} for r in results
    ])


def summarize_rows(rows: Sequence[dict]) -> list[dict]:
    """Summary rows from per-edit rows carrying mode, psnr, perceptual and alignment."""
    if not rows:
        raise ValueError("evaluate: no results")
    out = []
    for mode in MODES:
        rs = [r for r in rows if r["mode"] == mode]
        if not rs:
            continue
        out.append({
            "mode": mode,
            "n": len(rs),
            "psnr_mean": float(np.mean([float(r["psnr"]) for r in rs])),
            "perceptual_mean": float(np.mean([float(r["perceptual"]) for r in rs])),
            "alignment_mean": float(np.mean([float(r["alignment"]) for r in rs])),
        })
    return out


def _csv(rows, fields) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in row.items()})
    return buf.getvalue()


def summary_csv(rows: Sequence[dict]) -> str:
    return _csv(rows, SUMMARY_FIELDS)


def detail_csv(results: Sequence[EditResult]) -> str:
    return _csv([r.row() for r in results], DETAIL_FIELDS)


def diagnostics_csv(result: EditResult) -> str:
    return _csv(result.diagnostics, ("step", "t", "text_active", "perceptual_active", "objective"))


def read_detail_csv(text: str) -> list[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        for k in ("psnr", "perceptual", "alignment"):
            row[k] = float(row[k])
        rows.append(row)
    return rows


__all__ = [
    "MODES", "NULL_TEXT", "TEXT_OPT", "TEXT_OPT_PERCEPTUAL", "PipelineConfig", "Models", "EditResult",
    "invert", "reconstruct", "sample_edit", "edit", "edit_batch", "evaluate", "summarize_rows", "edit_pairs",
    "summary_csv", "detail_csv", "diagnostics_csv", "read_detail_csv", "recompute_metrics",
]
