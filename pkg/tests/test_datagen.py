"""Texture rendering, defect injection, and corpus determinism."""

import hashlib
import os

import numpy as np
import pytest

from defectscan import datagen as dg
from defectscan.errors import ConfigurationError


def test_degenerate_texture_is_constant_gray():
    spec = dg.TextureSpec(kind="stripes45", amplitude=0.0, noise_sigma=0.0)
    img = dg.gen_texture(spec, 32, 32)
    assert np.allclose(img, 0.5, atol=1e-7)


def test_stripe_orientations_are_mirror_images():
    a = dg.gen_texture(dg.TextureSpec(kind="stripes45", noise_sigma=0.0, seed=3), 40, 40)
    b = dg.gen_texture(dg.TextureSpec(kind="stripes135", noise_sigma=0.0, seed=3), 40, 40)
    assert np.allclose(a[:, ::-1], b, atol=1e-7)
    assert not np.allclose(a, b)


def test_stripe_autocorrelation_peaks_at_wavelength():
    lam = 8
    img = dg.gen_texture(dg.TextureSpec(kind="stripes45", wavelength=lam,
                                        noise_sigma=0.0), 96, 96)
    centered = img - img.mean()
    full = np.corrcoef(centered.ravel(), np.roll(centered, lam, axis=1).ravel())[0, 1]
    half = np.corrcoef(centered.ravel(), np.roll(centered, lam // 2, axis=1).ravel())[0, 1]
    assert full == pytest.approx(1.0, abs=1e-6)
    assert half == pytest.approx(-1.0, abs=1e-6)


def test_stochastic_texture_properties():
    spec = dg.TextureSpec(kind="stochastic", wavelength=6, amplitude=0.2,
                          noise_sigma=0.01, seed=5)
    a = dg.gen_texture(spec, 50, 50)
    b = dg.gen_texture(spec, 50, 50)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert a.std() > 0.01
    c = dg.gen_texture(dg.TextureSpec(kind="stochastic", seed=6), 50, 50)
    assert not np.array_equal(a, c)


def test_texture_validation():
    with pytest.raises(ConfigurationError):
        dg.gen_texture(dg.TextureSpec(kind="plaid"), 10, 10)
    with pytest.raises(ConfigurationError):
        dg.gen_texture(dg.TextureSpec(wavelength=1), 10, 10)


def test_null_defect_leaves_image_keeps_mask():
    img = dg.gen_texture(dg.TextureSpec(noise_sigma=0.0), 40, 40)
    spec = dg.DefectSpec(kind="blob", size=8, intensity_delta=0.0)
    out, mask = dg.inject_defect(img, spec, seed=1)
    assert np.array_equal(out, img)
    assert mask.sum() > 0


@pytest.mark.parametrize("kind", ["blob", "scratch"])
def test_defect_changes_exactly_the_mask(kind):
    # amplitude/delta chosen so no pixel saturates: changes match the mask 1:1
    img = dg.gen_texture(dg.TextureSpec(amplitude=0.15, noise_sigma=0.0), 50, 50)
    spec = dg.DefectSpec(kind=kind, size=9, intensity_delta=0.25)
    out, mask = dg.inject_defect(img, spec, seed=2)
    changed = out != img
    assert np.array_equal(changed, mask.astype(bool))


def test_blob_mask_area_bounds():
    img = np.full((60, 60), 0.5, np.float32)
    for seed in range(20):
        for size in (4, 8, 14):
            _, mask = dg.inject_defect(
                img, dg.DefectSpec(kind="blob", size=size), seed=seed)
            area = int(mask.sum())
            assert 0.5 * size ** 2 <= area <= 1.5 * size ** 2


def test_blob_energy_at_least_half_delta():
    img = dg.gen_texture(dg.TextureSpec(amplitude=0.2, noise_sigma=0.0), 50, 50)
    spec = dg.DefectSpec(kind="blob", size=10, intensity_delta=0.3)
    out, mask = dg.inject_defect(img, spec, seed=3)
    mean_change = np.abs(out - img)[mask.astype(bool)].mean()
    assert mean_change >= 0.5 * abs(spec.intensity_delta)


def test_missing_region_zeroes_square():
    img = np.full((40, 40), 0.8, np.float32)
    spec = dg.DefectSpec(kind="missing_region", size=6, position=(20, 20))
    out, mask = dg.inject_defect(img, spec, seed=0)
    assert mask.sum() == 36
    assert np.all(out[mask.astype(bool)] == 0.0)
    assert np.all(out[~mask.astype(bool)] == np.float32(0.8))


def test_defect_bounds_validation():
    img = np.zeros((30, 30), np.float32)
    with pytest.raises(ConfigurationError):
        dg.inject_defect(img, dg.DefectSpec(size=40), seed=0)
    with pytest.raises(ConfigurationError):
        dg.inject_defect(img, dg.DefectSpec(size=8, position=(1, 1)), seed=0)
    with pytest.raises(ConfigurationError):
        dg.inject_defect(img, dg.DefectSpec(size=1), seed=0)


def _tree_digest(root):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            h.update(os.path.relpath(full, root).encode())
            h.update(open(full, "rb").read())
    return h.hexdigest()


def test_corpus_layout_counts_and_determinism(tmp_path):
    textures = [dg.TextureSpec(kind="stripes45"), dg.TextureSpec(kind="stripes135")]
    defects = [dg.DefectSpec(kind="blob", size=10, intensity_delta=0.3)]
    for sub in ("a", "b"):
        dg.gen_corpus(str(tmp_path / sub), 6, 3, 4, textures, defects,
                      seed=42, height=48, width=48)
    assert _tree_digest(str(tmp_path / "a")) == _tree_digest(str(tmp_path / "b"))

    root = tmp_path / "a"
    assert len(list((root / "train/normal").glob("*.png"))) == 6
    assert len(list((root / "test/normal").glob("*.png"))) == 3
    assert len(list((root / "test/anomalous").glob("*.png"))) == 4
    assert len(list((root / "test/masks").glob("*.png"))) == 7

    import csv as _csv
    with open(root / "manifest.csv") as f:
        rows = list(_csv.DictReader(f))
    assert len(rows) == 13
    assert sum(int(r["label"]) for r in rows) == 4
    assert {r["kind"] for r in rows} == {"stripes45", "stripes135"}
    train_rows = [r for r in rows if r["path"].startswith("train/")]
    assert all(r["defect_kind"] == "" and r["label"] == "0" for r in train_rows)


def test_corpus_masks_match_labels(tmp_path):
    from defectscan.imageio import load_grayscale
    dg.gen_corpus(str(tmp_path), 2, 2, 2, [dg.TextureSpec()],
                  [dg.DefectSpec(size=8)], seed=0, height=40, width=40)
    normal_masks = sorted((tmp_path / "test/masks").glob("*.png"))[:2]
    for p in normal_masks:
        assert load_grayscale(str(p)).max() == 0.0
    anom_masks = sorted((tmp_path / "test/masks").glob("*.png"))[2:]
    for p in anom_masks:
        assert load_grayscale(str(p)).max() > 0.0


def test_corpus_validation(tmp_path):
    with pytest.raises(ConfigurationError):
        dg.gen_corpus(str(tmp_path), -1, 0, 0, [dg.TextureSpec()])
    with pytest.raises(ConfigurationError):
        dg.gen_corpus(str(tmp_path), 1, 1, 1, [dg.TextureSpec()], defects=None)
    with pytest.raises(ConfigurationError):
        dg.gen_corpus(str(tmp_path), 1, 0, 0, [])
