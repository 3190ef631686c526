import csv
import io
import json
import shutil

import numpy as np
import pytest
import yaml

from guidedit import artifacts
from guidedit.cli import main
from guidedit.config import OUTPUT_ENV

from conftest import TINY

FILES = ("codec.gdt", "denoiser.gdt", "perceptual.gdt")


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--output", str(out)]) == 0
    return cfg, out


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_train_writes_checkpoints_and_manifest(tiny):
    cfg, out = tiny
    for name in FILES:
        assert (out / "checkpoints" / name).stat().st_size > 0
    manifest = json.loads((out / "checkpoints" / "manifest.json").read_text())
    assert manifest["seed"] == 0 and len(manifest["config_hash"]) == 64
    assert set(manifest["checkpoints"]) == {"codec", "denoiser", "perceptual"}


def test_retrain_is_bit_identical(tiny, tmp_path):
    cfg, out = tiny
    assert main(["train", "--config", str(cfg), "--output", str(tmp_path)]) == 0
    for name in (*FILES, "manifest.json"):
        assert (tmp_path / "checkpoints" / name).read_bytes() == (out / "checkpoints" / name).read_bytes()


def test_single_component_training(tiny, tmp_path):
    cfg, out = tiny
    shutil.copytree(out / "checkpoints", tmp_path / "checkpoints")
    (tmp_path / "checkpoints" / "denoiser.gdt").unlink()
    assert main(["train", "--config", str(cfg), "--output", str(tmp_path), "--component", "denoiser"]) == 0
    assert (tmp_path / "checkpoints" / "denoiser.gdt").read_bytes() == (out / "checkpoints" / "denoiser.gdt").read_bytes()


def test_corrupt_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("guidance:\n  gamma_scale: 3\n")
    code, _, err = run(capsys, "train", "--config", bad, "--output", tmp_path / "o")
    assert code != 0 and "guidance.gamma_scale" in err
    assert not (tmp_path / "o").exists()


def test_missing_checkpoint_names_path(tmp_path, capsys):
    code, _, err = run(capsys, "edit", "--output", tmp_path)
    assert code == 1
    assert str(tmp_path / "checkpoints" / "codec.gdt") in err


def test_dataset_dump(tiny, tmp_path, capsys):
    cfg, _ = tiny
    code, _, _ = run(capsys, "dataset", "--config", cfg, "--output", tmp_path)
    assert code == 0
    assert len(list((tmp_path / "dataset").glob("*.pgm"))) == 36
    rows = list(csv.DictReader((tmp_path / "dataset" / "index.csv").open()))
    assert rows[0]["shape"] == "disk"
    assert artifacts.read_pgm(tmp_path / "dataset" / "0000.pgm").shape == (16, 16)


def test_edit_writes_images_and_csvs(tiny, capsys):
    cfg, out = tiny
    code, stdout, _ = run(capsys, "edit", "--config", cfg, "--output", out, "--index", 1,
                          "--mode", "text_opt_plus_perceptual")
    assert code == 0
    (d,) = [p for p in (out / "edits").glob("*/text_opt_plus_perceptual")]
    assert sorted(p.name for p in d.glob("*.pgm")) == ["edited.pgm", "source.pgm"]
    assert sorted(p.name for p in d.glob("*.csv")) == ["diagnostics.csv", "result.csv"]
    assert (d / "source.pgm").read_bytes()[:2] == b"P5"
    diag = list(csv.DictReader((d / "diagnostics.csv").open()))
    assert len(diag) == 10


def test_flag_override_changes_manifest_hash(tiny, tmp_path):
    cfg, out = tiny
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        shutil.copytree(out / "checkpoints", d / "checkpoints")
    assert main(["edit", "--config", str(cfg), "--output", str(a), "--mode", "text_opt"]) == 0
    assert main(["edit", "--config", str(cfg), "--output", str(b), "--mode", "text_opt", "--gamma", "2.5"]) == 0
    ma = json.loads(next(a.glob("edits/*/text_opt/manifest.json")).read_text())
    mb = json.loads(next(b.glob("edits/*/text_opt/manifest.json")).read_text())
    assert ma["config_hash"] != mb["config_hash"]
    assert mb["config"]["guidance"]["gamma"] == 2.5
    assert ma["checkpoints"] == mb["checkpoints"]


def test_edit_rejects_identical_prompt(tiny, capsys):
    cfg, out = tiny
    code, _, err = run(capsys, "edit", "--config", cfg, "--output", out, "--index", 0, "--edit-prompt", "disk,nw,low")
    assert code == 1 and "nothing to edit" in err


def test_eval_requires_every_mode(tiny, tmp_path, capsys):
    cfg, out = tiny
    assert main(["edit", "--config", str(cfg), "--output", str(out), "--mode", "null_text"]) == 0
    shutil.copytree(out / "edits", tmp_path / "edits")
    for d in (tmp_path / "edits").glob("*/text_opt"):
        shutil.rmtree(d)
    code, _, err = run(capsys, "eval", "--config", cfg, "--output", out, "--results", tmp_path)
    assert code == 1 and "text_opt" in err and "present: null_text" in err


def test_eval_batch_summary_and_strips(tiny, tmp_path, capsys):
    cfg, out = tiny
    code, _, _ = run(capsys, "eval", "--config", cfg, "--output", out, "--results", tmp_path, "--run")
    assert code == 0
    summary = list(csv.DictReader((tmp_path / "summary.csv").open()))
    assert [r["mode"] for r in summary] == ["null_text", "text_opt", "text_opt_plus_perceptual"]
    assert all(r["n"] == "3" for r in summary)
    strips = list((tmp_path / "strips").glob("*.pgm"))
    assert len(strips) == 3
    strip = artifacts.read_pgm(strips[0])
    assert strip.shape == (16, 4 * 16 + 3)
    assert np.all(strip[:, [16, 33, 50]] == 255)
    # independent recomputation from the per-edit CSV files
    for row in summary:
        values = [float(r["perceptual"]) for f in tmp_path.glob(f"edits/*/{row['mode']}/result.csv")
                  for r in csv.DictReader(f.open())]
        assert abs(np.mean(values) - float(row["perceptual_mean"])) < 1e-9
    again = tmp_path / "again"
    assert main(["eval", "--config", str(cfg), "--output", str(out), "--results", str(again), "--run"]) == 0
    for name in ("summary.csv", "details.csv"):
        assert (again / name).read_bytes() == (tmp_path / name).read_bytes()


def test_invert_command(tiny, capsys):
    cfg, out = tiny
    code, stdout, _ = run(capsys, "invert", "--config", cfg, "--output", out, "--index", 2)
    assert code == 0 and "PSNR" in stdout
    d = next((out / "inversions").glob("*_i2"))
    assert {p.name for p in d.iterdir()} >= {"source.pgm", "reconstruction.pgm", "trajectory.gdt", "result.csv"}
    arrays, _ = artifacts.load_tensors(d / "trajectory.gdt")
    assert len(arrays) == 11


def test_output_dir_from_environment(tiny, monkeypatch, capsys):
    cfg, out = tiny
    monkeypatch.setenv(OUTPUT_ENV, str(out))
    code, _, _ = run(capsys, "invert", "--config", cfg, "--index", 3)
    assert code == 0 and next((out / "inversions").glob("*_i3"))


def test_artifact_writer_cleans_up_on_failure(tmp_path):
    with pytest.raises(RuntimeError):
        with artifacts.ArtifactWriter() as w:
            w.text(tmp_path / "a" / "one.txt", "x")
            raise RuntimeError("boom")
    assert not (tmp_path / "a" / "one.txt").exists()


def test_pgm_round_trip(tmp_path, rng):
    img = rng.uniform(0, 1, (1, 16, 16))
    artifacts.write_pgm(tmp_path / "x.pgm", img)
    back = artifacts.read_pgm(tmp_path / "x.pgm")
    assert np.array_equal(back, np.round(img[0] * 255).astype(np.uint8))


def test_no_guidance_edit_reproduces_reconstruction(trained_dir, tmp_path, capsys):
    shutil.copytree(trained_dir / "checkpoints", tmp_path / "checkpoints")
    code, stdout, _ = run(capsys, "invert", "--output", tmp_path, "--index", 0)
    assert code == 0
    code, _, _ = run(capsys, "edit", "--output", tmp_path, "--index", 0, "--mode", "null_text",
                     "--gamma", 1, "--beta", 0)
    assert code == 0
    edited = next(tmp_path.glob("edits/*/null_text/edited.pgm")).read_bytes()
    recon = next(tmp_path.glob("inversions/*/reconstruction.pgm")).read_bytes()
    assert edited == recon
    row = next(csv.DictReader(io.StringIO(next(tmp_path.glob("edits/*/null_text/result.csv")).read_text())))
    assert float(row["psnr"]) >= 25.0
