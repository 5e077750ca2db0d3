"""End-to-end command tests: artifacts, determinism, exit codes."""

import csv
import hashlib
import json
import os

import numpy as np
import pytest
from PIL import Image

from defectscan.cli import main

TINY_CFG = {
    "image": {"size": 48},
    "patch": {"size": 28, "stride": 10, "batch": 32},
    "schedule": {"steps": 100},
    "unet": {"base_channels": 8, "channel_multipliers": [1], "time_embed_dim": 16,
             "groups": 4, "attention_levels": [True]},
    "train": {"epochs": 2, "batch_size": 16, "learning_rate": 1e-3, "seed": 1},
    "features": {"window": 16, "window_stride": 4},
    "forest": {"subsample": 64},
    "synth": {"n_normal_train": 8, "n_normal_test": 3, "n_anomalous_test": 3,
              "height": 48, "width": 48,
              "defects": [{"kind": "blob", "size": 10, "intensity_delta": 0.35,
                           "position": None}]},
}


def _digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny corpus + trained checkpoint + forest, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY_CFG))
    base = ["--config", cfg, "--threads", "1"]
    assert _run(*base, "--out", root / "corpus", "synth") == 0
    assert _run(*base, "--out", root / "train", "train", root / "corpus/train/normal") == 0
    assert _run(*base, "--out", root / "fit", "fit-detector", root / "corpus/train/normal",
                "--checkpoint", root / "train/model.ckpt") == 0
    assert _run(*base, "--out", root / "detect", "detect",
                root / "corpus/test/normal", root / "corpus/test/anomalous",
                "--checkpoint", root / "train/model.ckpt",
                "--forest", root / "fit/forest.json") == 0
    return root, cfg


def test_synth_layout_and_determinism(workspace, tmp_path):
    root, cfg = workspace
    for sub in ("train/normal", "test/normal", "test/anomalous", "test/masks"):
        assert (root / "corpus" / sub).is_dir()
    assert (root / "corpus/manifest.csv").exists()
    # regenerate with the same seed: byte-identical corpus
    assert _run("--config", cfg, "--out", tmp_path / "again", "synth") == 0
    a = sorted((root / "corpus").rglob("*.png"))
    b = sorted((tmp_path / "again").rglob("*.png"))
    assert [p.name for p in a] == [p.name for p in b]
    assert all(_digest(x) == _digest(y) for x, y in zip(a, b))


def test_synth_invalid_count_names_field(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    bad = json.loads(json.dumps(TINY_CFG))
    bad["synth"]["n_normal_train"] = -2
    cfg.write_text(json.dumps(bad))
    assert _run("--config", cfg, "--out", tmp_path / "x", "synth") == 1
    assert "n_normal_train" in capsys.readouterr().err


def test_unknown_config_key_is_hard_error(tmp_path, capsys):
    cfg = tmp_path / "typo.json"
    cfg.write_text(json.dumps({"train": {"epoches": 3}}))
    assert _run("--config", cfg, "--out", tmp_path / "x", "synth") == 1
    assert "epoches" in capsys.readouterr().err


def test_train_manifest_counts_and_loss_csv(workspace):
    root, _ = workspace
    man = json.loads((root / "train/manifest.json").read_text())
    # 48x48 at patch 28 stride 10: 3x3 anchors, 8 images
    assert man["counts"]["train_patches"] == 8 * 9
    assert man["counts"]["train_images"] == 8
    assert man["counts"]["parameters"] > 0
    lines = (root / "train/loss.csv").read_text().strip().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == man["counts"]["train_steps"] + 1


def test_train_patch_arithmetic_81_images(tmp_path):
    """81 normal 100x100 images at stride 1 -> 431,649 patches in the manifest."""
    data = tmp_path / "imgs"
    data.mkdir()
    rng = np.random.default_rng(0)
    for i in range(81):
        arr = (rng.uniform(0, 255, size=(100, 100))).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(data / f"{i:04d}.png")
    cfg = tmp_path / "cfg.json"
    spec = json.loads(json.dumps(TINY_CFG))
    spec["image"]["size"] = 100
    spec["patch"]["stride"] = 1
    spec["train"]["epochs"] = 0  # arithmetic only, no optimization steps
    cfg.write_text(json.dumps(spec))
    out = tmp_path / "run"
    assert _run("--config", cfg, "--out", out, "train", data) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["counts"]["train_patches"] == 431649


def test_train_rerun_identical_checkpoint(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "train2"
    assert _run("--config", cfg, "--threads", "1", "--out", out, "train",
                root / "corpus/train/normal") == 0
    assert _digest(out / "model.ckpt") == _digest(root / "train/model.ckpt")
    assert _digest(out / "loss.csv") == _digest(root / "train/loss.csv")


def test_train_accepts_color_images(tmp_path):
    data = tmp_path / "imgs"
    data.mkdir()
    rng = np.random.default_rng(1)
    for i in range(2):
        arr = rng.uniform(0, 255, size=(48, 48, 3)).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(data / f"{i}.png")
    cfg = tmp_path / "cfg.json"
    spec = json.loads(json.dumps(TINY_CFG))
    spec["train"]["epochs"] = 0
    cfg.write_text(json.dumps(spec))
    assert _run("--config", cfg, "--out", tmp_path / "run", "train", data) == 0


def test_fit_detector_outputs(workspace):
    root, _ = workspace
    with open(root / "fit/features.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 8
    assert set(rows[0]) == {"id", "global", "local"}
    forest = json.loads((root / "fit/forest.json").read_text())
    assert forest["n_estimators"] == 100
    assert forest["contamination"] == 0.05
    assert len(forest["trees"]) == 100
    assert len(forest["train_scores"]) == 8


def test_detect_verdicts_and_single_step_guarantee(workspace):
    root, _ = workspace
    with open(root / "detect/verdicts.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 6
    assert set(rows[0]) == {"id", "global", "local", "score", "predicted", "seconds"}
    man = json.loads((root / "detect/manifest.json").read_text())
    # exactly one U-Net evaluation per patch per draw
    assert man["counts"]["unet_patch_evals"] == man["counts"]["patches"]
    assert man["counts"]["patches"] == 6 * 9
    # heatmaps only for flagged images by default
    flagged = [r["id"] for r in rows if r["predicted"] == "anomalous"]
    pngs = sorted(p.name for p in (root / "detect/heatmaps").glob("*.png"))
    assert pngs == sorted(os.path.splitext(f)[0] + ".png" for f in flagged)


def test_detect_rerun_byte_identical(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "detect2"
    assert _run("--config", cfg, "--threads", "1", "--out", out, "detect",
                root / "corpus/test/normal", root / "corpus/test/anomalous",
                "--checkpoint", root / "train/model.ckpt",
                "--forest", root / "fit/forest.json") == 0
    v1 = (root / "detect/verdicts.csv").read_text()
    v2 = (out / "verdicts.csv").read_text()
    # timing column varies run to run; everything else must match exactly
    strip = lambda text: ["," .join(line.split(",")[:-1]) for line in text.splitlines()]
    assert strip(v1) == strip(v2)


def test_detect_threads_match_serial(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "detect4"
    assert _run("--config", cfg, "--threads", "4", "--out", out, "detect",
                root / "corpus/test/normal", "--checkpoint", root / "train/model.ckpt",
                "--forest", root / "fit/forest.json") == 0
    with open(out / "verdicts.csv") as f:
        threaded = [(r["id"], r["score"]) for r in csv.DictReader(f)]
    with open(root / "detect/verdicts.csv") as f:
        serial = [(r["id"], r["score"]) for r in csv.DictReader(f)]
    serial_subset = [s for s in serial if s[0] in {t[0] for t in threaded}]
    assert threaded == serial_subset


def test_detect_all_heatmaps_flag(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "detect_all"
    assert _run("--config", cfg, "--out", out, "detect", root / "corpus/test/normal",
                "--checkpoint", root / "train/model.ckpt",
                "--forest", root / "fit/forest.json", "--all-heatmaps") == 0
    assert len(list((out / "heatmaps").glob("*.png"))) == 3


def test_detect_patch_size_mismatch_is_validation_error(workspace, tmp_path, capsys):
    root, cfg = workspace
    bad = json.loads(json.dumps(TINY_CFG))
    bad["patch"]["size"] = 8
    bad["patch"]["stride"] = 8
    cfg2 = tmp_path / "bad.json"
    cfg2.write_text(json.dumps(bad))
    code = _run("--config", cfg2, "--out", tmp_path / "x", "detect",
                root / "corpus/test/normal",
                "--checkpoint", root / "train/model.ckpt",
                "--forest", root / "fit/forest.json")
    assert code == 1
    err = capsys.readouterr().err
    assert "28" in err and "8" in err


def test_missing_checkpoint_is_validation_error(workspace, tmp_path):
    root, cfg = workspace
    assert _run("--config", cfg, "--out", tmp_path / "x", "detect",
                root / "corpus/test/normal", "--checkpoint", tmp_path / "nope.ckpt",
                "--forest", root / "fit/forest.json") == 1


def test_eval_and_sweep_outputs(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "eval"
    assert _run("--config", cfg, "--out", out, "eval",
                "--verdicts", root / "detect/verdicts.csv",
                "--labels", root / "corpus/manifest.csv") == 0
    with open(out / "metrics.csv") as f:
        row = list(csv.DictReader(f))[0]
    for key in ("accuracy", "precision", "recall", "f1"):
        assert 0.0 <= float(row[key]) <= 1.0
    with open(out / "verdicts.csv") as f:
        labeled = list(csv.DictReader(f))
    assert len(labeled) == 6
    assert set(labeled[0]) == {"id", "global", "local", "score", "predicted", "actual"}

    sweep_out = tmp_path / "sweep"
    assert _run("--config", cfg, "--out", sweep_out, "sweep",
                "--verdicts", root / "detect/verdicts.csv",
                "--labels", root / "corpus/manifest.csv",
                "--forest", root / "fit/forest.json") == 0
    with open(sweep_out / "sweep.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 11
    flagged = [int(r["flagged"]) for r in rows]
    assert flagged == sorted(flagged)


def test_eval_perfect_verdicts(tmp_path):
    verdicts = tmp_path / "verdicts.csv"
    labels = tmp_path / "labels.csv"
    with open(verdicts, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "global", "local", "score", "predicted", "seconds"])
        w.writerow(["a.png", "1", "1", "0.9", "anomalous", "0.1"])
        w.writerow(["b.png", "1", "1", "0.2", "normal", "0.1"])
    with open(labels, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["path", "label"])
        w.writerow(["x/a.png", "1"])
        w.writerow(["x/b.png", "0"])
    out = tmp_path / "out"
    assert _run("--out", out, "eval", "--verdicts", verdicts, "--labels", labels) == 0
    with open(out / "metrics.csv") as f:
        row = list(csv.DictReader(f))[0]
    assert all(float(row[k]) == 1.0 for k in ("accuracy", "precision", "recall", "f1"))


def test_manifests_written_for_all_commands(workspace):
    root, _ = workspace
    for sub in ("corpus", "train", "fit", "detect"):
        man = json.loads((root / sub / "manifest.json").read_text())
        assert man["version"]
        assert man["config"]["patch"]["size"] == 28
        assert "seeds" in man and "timings" in man
