import csv
import io

import numpy as np
import pytest

from guidedit.codec import CodecParams
from guidedit.data import DatasetSpec, sample
from guidedit.denoiser import DenoiserConfig, init_denoiser
from guidedit.guidance import GuidanceConfig
from guidedit.perceptual import init_perceptual, perceptual_distance, psnr
from guidedit.pipeline import (
    MODES, EditResult, Models, PipelineConfig, detail_csv, edit, edit_batch, edit_pairs, evaluate, invert,
    read_detail_csv, recompute_metrics, reconstruct, summary_csv,
)
from guidedit.prompts import Prompt
from guidedit.schedule import make_schedule
from guidedit.tensor import Tensor

SPEC = DatasetSpec(seed=1000)


def result(mode, psnr_value, perceptual, alignment, index=0):
    img = np.zeros((1, 16, 16))
    return EditResult(img, img, Prompt(1, 1, 1), Prompt(2, 1, 1), mode, psnr_value, perceptual, alignment, index=index)


def test_zero_noise_identity_codec_is_exact():
    sched = make_schedule(10, "linear", 0.0, 0.0)
    den = init_denoiser(DenoiserConfig(width=8), latent_shape=(1, 16, 16), T=10)
    models = Models(sched, den, CodecParams.identity())
    x, p = sample(3, SPEC)
    cfg = PipelineConfig(inference_steps=5)
    traj = invert(x, p, models, cfg)
    assert len(traj) == 6
    assert all(z.tobytes() == traj[0].tobytes() for z in traj)
    assert np.array_equal(reconstruct(x, p, models, cfg)[0], x)


def test_invert_requires_denoiser():
    models = Models(make_schedule(10), None, CodecParams.identity())
    with pytest.raises(ValueError, match="denoiser"):
        invert(sample(0, SPEC)[0], Prompt(1, 1, 1), models, PipelineConfig(inference_steps=5))


def test_identical_prompts_rejected():
    den = init_denoiser(DenoiserConfig(width=8), latent_shape=(1, 16, 16), T=10)
    models = Models(make_schedule(10), den, CodecParams.identity(), init_perceptual(), object())
    x, p = sample(0, SPEC)
    with pytest.raises(ValueError, match="nothing to edit"):
        edit(x, p, p, models, GuidanceConfig(), "text_opt", PipelineConfig(inference_steps=5))


def test_pipeline_config_validation():
    for kwargs in ({"inversion": "other"}, {"perceptual_order": "never"}, {"inference_steps": 0}, {"edit_slots": (5,)}):
        with pytest.raises(ValueError):
            PipelineConfig(**kwargs)


def test_evaluate_single_perfect_reconstruction():
    x = sample(0, SPEC)[0]
    r = result("text_opt", psnr(x, x), perceptual_distance(Tensor(x), Tensor(x), init_perceptual()), 0.5)
    (row,) = evaluate([r])
    assert row["psnr_mean"] == 99.0 and row["perceptual_mean"] == 0.0 and row["n"] == 1


def test_evaluate_row_order_is_fixed():
    rows = evaluate([result(m, 1.0, 0.0, 0.0) for m in reversed(MODES)] * 2)
    assert [r["mode"] for r in rows] == list(MODES)
    assert summary_csv(rows).splitlines()[0] == "mode,n,psnr_mean,perceptual_mean,alignment_mean"
    with pytest.raises(ValueError):
        evaluate([])


def test_summary_matches_independent_recomputation():
    r = np.random.default_rng(0)
    results = [result(MODES[i % 3], *r.uniform(0, 30, 3), index=i) for i in range(30)]
    summary = {row["mode"]: row for row in evaluate(results)}
    sums: dict[str, list[float]] = {}
    for row in csv.DictReader(io.StringIO(detail_csv(results))):
        acc = sums.setdefault(row["mode"], [0.0, 0.0, 0.0, 0])
        for k, key in enumerate(("psnr", "perceptual", "alignment")):
            acc[k] += float(row[key])
        acc[3] += 1
    for mode, (p, d, a, n) in sums.items():
        assert abs(summary[mode]["psnr_mean"] - p / n) < 1e-9
        assert abs(summary[mode]["perceptual_mean"] - d / n) < 1e-9
        assert abs(summary[mode]["alignment_mean"] - a / n) < 1e-9
    assert [row["psnr"] for row in read_detail_csv(detail_csv(results))] == [x.psnr for x in results]


def test_edit_pairs_are_single_attribute_and_deterministic():
    pairs = edit_pairs(30, DatasetSpec(), slots=(0, 1, 2))
    assert len(pairs) == 30
    for img, src, tgt, idx in pairs:
        assert sum(a != b for a, b in zip(src, tgt)) == 1
        assert np.array_equal(img, sample(idx, SPEC)[0])
    again = edit_pairs(30, DatasetSpec(), slots=(0, 1, 2))
    assert [(s, t, i) for _, s, t, i in pairs] == [(s, t, i) for _, s, t, i in again]
    assert all(s[1:] == t[1:] for _, s, t, _ in edit_pairs(10, DatasetSpec()))


# -- trained-model checks ------------------------------------------------------------

FAST = PipelineConfig(inference_steps=10)
FAST_GUIDANCE = GuidanceConfig.default_for(10)


def test_edit_is_deterministic_and_metrics_recompute(trained_models):
    x, p = sample(7, SPEC)
    tgt = p.replace_slot(0, p.shape % 3 + 1)
    a = edit(x, p, tgt, trained_models, FAST_GUIDANCE, "text_opt_plus_perceptual", FAST)
    b = edit(x, p, tgt, trained_models, FAST_GUIDANCE, "text_opt_plus_perceptual", FAST)
    assert a.edited.tobytes() == b.edited.tobytes()
    assert (a.psnr, a.perceptual, a.alignment) == (b.psnr, b.perceptual, b.alignment)
    for stored, again in zip((a.psnr, a.perceptual, a.alignment), recompute_metrics(a, trained_models)):
        assert abs(stored - again) < 1e-9
    assert a.edited.min() >= 0 and a.edited.max() <= 1


def test_diagnostics_follow_the_gates(trained_models):
    x, p = sample(2, SPEC)
    tgt = p.replace_slot(0, p.shape % 3 + 1)
    out = edit_batch(x, p, tgt, trained_models, FAST_GUIDANCE, MODES, FAST)
    for mode in MODES:
        diags = out[mode][0].diagnostics
        assert len(diags) == 10
        assert [d["text_active"] for d in diags] == [mode != "null_text" and k < 4 for k in range(10)]
        perc = [d["perceptual_active"] for d in diags]
        assert perc == [mode == "text_opt_plus_perceptual" and k >= 4 for k in range(10)]
        assert all(np.isnan(d["objective"]) != d["perceptual_active"] for d in diags)


def test_trajectory_retention_and_perceptual_order(trained_models):
    x, p = sample(4, SPEC)
    tgt = p.replace_slot(2, p.intensity % 3 + 1)
    cfg = PipelineConfig(inference_steps=10, retain_trajectory=True, perceptual_order="after")
    r = edit(x, p, tgt, trained_models, FAST_GUIDANCE, "text_opt_plus_perceptual", cfg)
    assert len(r.trajectory) == 21
    assert r.trajectory[0].shape == (4, 8, 8)
    assert edit(x, p, tgt, trained_models, FAST_GUIDANCE, "text_opt", FAST).trajectory is None


def test_more_steps_reconstruct_better(trained_models):
    xs = np.stack([sample(i, SPEC)[0] for i in range(0, 40, 4)])
    ps = [sample(i, SPEC)[1] for i in range(0, 40, 4)]

    def mean_psnr(steps):
        rec = reconstruct(xs, ps, trained_models, PipelineConfig(inference_steps=steps))
        return np.mean([psnr(a, b) for a, b in zip(xs, rec)])

    assert mean_psnr(50) > mean_psnr(5)
