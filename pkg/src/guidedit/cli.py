"""Command-line entry point: ``guidedit {train,dataset,invert,edit,eval}``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import artifacts, runner
from .artifacts import ArtifactWriter
from .config import ConfigError, RunConfig
from .data import DatasetSpec, generate_dataset, sample
from .pipeline import MODES, edit_batch, invert, reconstruct, summarize_rows, summary_csv
from .perceptual import psnr
from .prompts import VOCAB, Prompt
from .tensor import save_tensors

log = logging.getLogger("guidedit")


def _range(text: str):
    text = text.strip().lower()
    if text in ("", "none", "empty"):
        return None
    lo, _, hi = text.partition(":")
    return [int(lo), int(hi)]


def _flag_overrides(args) -> dict:
    mapping = {
        "gamma": "guidance.gamma",
        "beta": "guidance.beta",
        "lam": "guidance.lam",
        "variant": "guidance.variant",
        "inner_iters": "guidance.inner_iters",
        "text_range": "guidance.text_range",
        "perceptual_range": "guidance.perceptual_range",
        "steps": "schedule.inference_steps",
        "seed": "seed",
    }
    out = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    if getattr(args, "backtrack", None) is not None:
        out["guidance.backtrack"] = args.backtrack
    return out


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    overrides = _flag_overrides(args)
    return cfg.with_overrides(overrides) if overrides else cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.output) if getattr(args, "output", None) else cfg.output_dir


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    paths = runner.train(cfg, args.component, out)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def cmd_dataset(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg) / "dataset"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "file", "shape", "position", "intensity"])
    with ArtifactWriter() as w:
        for i, (img, p) in enumerate(generate_dataset(cfg.dataset)):
            name = f"{i:04d}.pgm"
            artifacts.write_pgm(w.path(out / name), img)
            writer.writerow([i, name, *p.names()])
        w.text(out / "index.csv", buf.getvalue())
    print(f"wrote {len(cfg.dataset)} images to {out}")
    return 0


def _held_out(cfg: RunConfig) -> DatasetSpec:
    d = cfg.dataset
    return DatasetSpec(d.size, d.samples_per_combination, d.jitter, d.background, cfg.pipeline.eval_seed)


def cmd_invert(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    models = runner.load_models(cfg, out, need=("denoiser",))
    spec = _held_out(cfg)
    img, prompt = sample(args.index, spec)
    traj = invert(img, prompt, models, cfg.pipeline)
    recon = reconstruct(img, prompt, models, cfg.pipeline)[0]
    d = out / "inversions" / f"s{spec.seed}_i{args.index}"
    with ArtifactWriter() as w:
        artifacts.write_pgm(w.path(d / "source.pgm"), img)
        artifacts.write_pgm(w.path(d / "reconstruction.pgm"), recon)
        save_tensors(w.path(d / "trajectory.gdt"), {f"z{k:03d}": z[0] for k, z in enumerate(traj)},
                     {"kind": "trajectory", "prompt": str(prompt)})
        value = psnr(img, recon)
        w.text(d / "result.csv", f"seed,index,prompt,steps,psnr\n{spec.seed},{args.index},{prompt},"
                                 f"{cfg.pipeline.inference_steps},{value!r}\n")
        w.json(d / "manifest.json", runner.manifest(cfg, out, "invert", index=args.index))
    print(f"reconstruction PSNR {value:.3f} dB -> {d}")
    return 0


def _default_edit(prompt: Prompt) -> Prompt:
    return prompt.replace_slot(0, prompt.shape % (VOCAB[0] - 1) + 1)


def cmd_edit(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    models = runner.load_models(cfg, out)
    spec = _held_out(cfg)
    img, src = sample(args.index, spec)
    tgt = Prompt.parse(args.edit_prompt) if args.edit_prompt else _default_edit(src)
    modes = MODES if args.mode == "all" else (args.mode,)
    results = edit_batch(img, src, tgt, models, cfg.guidance, modes, cfg.pipeline,
                         seeds=[spec.seed], indices=[args.index])
    with ArtifactWriter() as w:
        for mode in modes:
            r = results[mode][0]
            d = runner.write_result(w, out, r)
            w.json(d / "manifest.json", runner.manifest(cfg, out, "edit", mode=mode, index=args.index,
                                                        edit_prompt=str(tgt)))
            print(f"{mode}: psnr {r.psnr:.3f} perceptual {r.perceptual:.4f} alignment {r.alignment:.4f} -> {d}")
    return 0


def _collect(results_dir: Path) -> dict[str, dict[str, Path]]:
    found: dict[str, dict[str, Path]] = {}
    for res in sorted(results_dir.glob("edits/*/*/result.csv")):
        found.setdefault(res.parent.parent.name, {})[res.parent.name] = res.parent
    return found


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    results_dir = Path(args.results) if args.results else _out_dir(args, cfg)
    if args.run:
        models = runner.load_models(cfg, _out_dir(args, cfg))
        batch = runner.run_eval_batch(cfg, models)
        with ArtifactWriter() as w:
            for mode in MODES:
                for r in batch[mode]:
                    runner.write_result(w, results_dir, r)
    found = _collect(results_dir)
    present = sorted({m for modes in found.values() for m in modes})
    missing = [m for m in MODES if m not in present]
    if missing:
        raise ValueError(f"results in {results_dir} lack mode(s) {', '.join(missing)}; "
                         f"present: {', '.join(present) or 'none'}")
    rows = []
    for key in sorted(found):
        for mode in MODES:
            if mode in found[key]:
                rows.extend(csv.DictReader(io.StringIO((found[key][mode] / "result.csv").read_text())))
    summary = summarize_rows(rows)
    with ArtifactWriter() as w:
        w.text(results_dir / "summary.csv", summary_csv(summary))
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        w.text(results_dir / "details.csv", buf.getvalue())
        for key, modes in sorted(found.items()):
            if not all(m in modes for m in MODES):
                continue
            tiles = [artifacts.read_pgm(modes[MODES[0]] / "source.pgm")]
            tiles += [artifacts.read_pgm(modes[m] / "edited.pgm") for m in MODES]
            artifacts.write_pgm(w.path(results_dir / "strips" / f"{key}.pgm"),
                                artifacts.comparison_strip(tiles))
        w.json(results_dir / "eval_manifest.json", runner.manifest(cfg, _out_dir(args, cfg), "eval",
                                                                  results=len(rows)))
    for row in summary:
        print(f"{row['mode']:<26} n={row['n']:<3} psnr={row['psnr_mean']:.3f} "
              f"perceptual={row['perceptual_mean']:.4f} alignment={row['alignment_mean']:.4f}")
    return 0


def _guidance_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=float, help="source-prompt guidance scale")
    p.add_argument("--beta", type=float, help="edit-prompt guidance scale")
    p.add_argument("--lambda", dest="lam", type=float, help="perceptual step size")
    p.add_argument("--variant", choices=("src_anchor", "null_anchor"))
    p.add_argument("--inner-iters", type=int)
    p.add_argument("--text-range", type=_range, help="inclusive step interval lo:hi, or 'none'")
    p.add_argument("--perceptual-range", type=_range, help="inclusive step interval lo:hi, or 'none'")
    p.add_argument("--backtrack", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--steps", type=int, help="inference steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guidedit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML run config (defaults apply when omitted)")
        p.add_argument("--output", type=Path, help="output directory (overrides config and env)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train codec, denoiser and perceptual models")
    common(p)
    p.add_argument("--component", choices=(*runner.COMPONENTS, "all"), default="all")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dataset", help="dump the toy dataset as PGM images")
    common(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("invert", help="invert and reconstruct one held-out image")
    common(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--steps", type=int, help="inference steps")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("edit", help="edit one held-out image")
    common(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--edit-prompt", help="e.g. 'square,ne,high'; default swaps the shape")
    p.add_argument("--mode", choices=(*MODES, "all"), default="text_opt_plus_perceptual")
    _guidance_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="summarise edit results and write comparison strips")
    common(p)
    p.add_argument("--results", type=Path, help="results directory (default: output directory)")
    p.add_argument("--run", action="store_true", help="first run the standard evaluation batch")
    _guidance_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
    except artifacts.MissingCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
