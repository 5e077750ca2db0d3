"""Deterministic synthetic corpus: periodic stripe and stochastic textures,
with injected defects and exact ground-truth masks.

Stands in for proprietary production imagery at desk scale; every image,
defect and file is reproducible from a single seed.
"""

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from . import features, imageio
from .errors import ConfigurationError

TEXTURE_KINDS = ("stripes45", "stripes135", "stochastic")
DEFECT_KINDS = ("blob", "scratch", "missing_region")


@dataclass(frozen=True)
class TextureSpec:
    kind: str = "stripes45"
    wavelength: float = 8.0
    amplitude: float = 0.25
    noise_sigma: float = 0.02
    seed: int = 0

    def validate(self):
        if self.kind not in TEXTURE_KINDS:
            raise ConfigurationError(f"unknown texture kind {self.kind!r}")
        if self.wavelength < 2:
            raise ConfigurationError(f"wavelength must be >= 2, got {self.wavelength}")
        if self.amplitude < 0 or self.noise_sigma < 0:
            raise ConfigurationError("amplitude and noise_sigma must be >= 0")
        return self


@dataclass(frozen=True)
class DefectSpec:
    kind: str = "blob"
    size: int = 10
    intensity_delta: float = 0.3
    position: tuple = None  # (row, col) center; None draws a seeded position

    def validate(self):
        if self.kind not in DEFECT_KINDS:
            raise ConfigurationError(f"unknown defect kind {self.kind!r}")
        if self.size < 2:
            raise ConfigurationError(f"defect size must be >= 2, got {self.size}")
        return self


def gen_texture(spec, h, w):
    """Render one texture as float32 [h, w] in [0, 1].

    Stripes: 0.5 + A sin(2 pi u / wavelength) along the 45/135 diagonal plus
    pixel noise.  The 135 variant is the exact horizontal mirror of the 45
    formula.  Stochastic: seeded Gaussian noise smoothed to the wavelength
    scale, normalized to unit spread, scaled by the amplitude.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if spec.kind == "stripes45":
        base = 0.5 + spec.amplitude * np.sin(2 * np.pi * (xs + ys) / spec.wavelength)
    elif spec.kind == "stripes135":
        base = 0.5 + spec.amplitude * np.sin(2 * np.pi * ((w - 1 - xs) + ys) / spec.wavelength)
    else:
        field = rng.standard_normal((h, w))
        radius = max(1, min(int(round(spec.wavelength / 2)), min(h, w) - 1))
        smooth = features.blur(field, kind="gaussian", radius=radius,
                               sigma=max(spec.wavelength / 4.0, 0.5)).astype(np.float64)
        spread = smooth.std()
        if spread > 0:
            smooth /= spread
        base = 0.5 + spec.amplitude * smooth
    if spec.noise_sigma > 0:
        base = base + rng.normal(0.0, spec.noise_sigma, size=(h, w))
    return np.clip(base, 0.0, 1.0).astype(np.float32)


def _disk_mask(h, w, center, radius):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return ((ys - center[0]) ** 2 + (xs - center[1]) ** 2) <= radius ** 2


def _segment_mask(h, w, center, angle, length, thickness):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = np.sin(angle), np.cos(angle)
    ry, rx = ys - center[0], xs - center[1]
    along = ry * dy + rx * dx
    across = np.abs(-ry * dx + rx * dy)
    return (np.abs(along) <= length / 2.0) & (across <= thickness / 2.0)


def inject_defect(image, spec, seed=0):
    """Apply one defect; returns (defective image, uint8 mask of the region).

    blob: add intensity_delta inside a disk of diameter `size`.
    scratch: add intensity_delta along a 2-px-thick seeded line of length `size`.
    missing_region: zero out a `size` x `size` square.
    Values clip to [0, 1]; saturated pixels may leave the image unchanged
    under the mask.
    """
    spec.validate()
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape
    rng = np.random.default_rng(seed)
    half = spec.size / 2.0
    margin = int(np.ceil(half)) + 1
    if 2 * margin >= min(h, w):
        raise ConfigurationError(f"defect size {spec.size} does not fit in {h}x{w}")
    if spec.position is None:
        center = (int(rng.integers(margin, h - margin)),
                  int(rng.integers(margin, w - margin)))
    else:
        center = (int(spec.position[0]), int(spec.position[1]))
        if not (margin <= center[0] < h - margin and margin <= center[1] < w - margin):
            raise ConfigurationError(f"defect at {center} exceeds image bounds {h}x{w}")

    if spec.kind == "blob":
        mask = _disk_mask(h, w, center, half)
        out = np.where(mask, img + spec.intensity_delta, img)
    elif spec.kind == "scratch":
        angle = rng.uniform(0, np.pi)
        mask = _segment_mask(h, w, center, angle, spec.size, 2.0)
        out = np.where(mask, img + spec.intensity_delta, img)
    else:  # missing_region
        mask = np.zeros((h, w), dtype=bool)
        r0, c0 = center[0] - spec.size // 2, center[1] - spec.size // 2
        mask[r0:r0 + spec.size, c0:c0 + spec.size] = True
        out = np.where(mask, 0.0, img)
    return np.clip(out, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


MANIFEST_COLUMNS = ["path", "label", "kind", "wavelength", "amplitude",
                    "noise_sigma", "defect_kind", "defect_size",
                    "defect_delta", "seed"]


def gen_corpus(out_dir, n_normal_train, n_normal_test, n_anomalous_test,
               textures, defects=None, seed=0, height=100, width=100):
    """Write a labeled corpus to disk and return its manifest rows.

    Layout: {train/normal, test/normal, test/anomalous, test/masks}/NNNN.png
    with globally unique numbering, plus manifest.csv.  Masks are written for
    every test image (all-zero for normal ones).  Fully reproducible: the
    per-image seeds derive from `seed`.
    """
    for name, count in (("n_normal_train", n_normal_train),
                        ("n_normal_test", n_normal_test),
                        ("n_anomalous_test", n_anomalous_test)):
        if count < 0:
            raise ConfigurationError(f"{name} must be >= 0, got {count}")
    if not textures:
        raise ConfigurationError("need at least one texture spec")
    if n_anomalous_test > 0 and not defects:
        raise ConfigurationError("anomalous images requested but no defect specs given")
    for tspec in textures:
        tspec.validate()
    for dspec in defects or []:
        dspec.validate()

    dirs = {name: os.path.join(out_dir, name)
            for name in ("train/normal", "test/normal", "test/anomalous", "test/masks")}
    for d in dirs.values():
        os.makedirs(d, exist_ok=True)

    total = n_normal_train + n_normal_test + n_anomalous_test
    seeds = np.random.SeedSequence(seed).generate_state(2 * max(total, 1), dtype=np.uint32)
    manifest = []
    counter = 0

    def render(i):
        tspec = replace(textures[i % len(textures)], seed=int(seeds[i]))
        return tspec, gen_texture(tspec, height, width)

    def record(rel_path, label, tspec, dspec, used_seed):
        manifest.append({
            "path": rel_path, "label": label, "kind": tspec.kind,
            "wavelength": tspec.wavelength, "amplitude": tspec.amplitude,
            "noise_sigma": tspec.noise_sigma,
            "defect_kind": dspec.kind if dspec else "",
            "defect_size": dspec.size if dspec else "",
            "defect_delta": dspec.intensity_delta if dspec else "",
            "seed": used_seed,
        })

    for _ in range(n_normal_train):
        tspec, img = render(counter)
        rel = f"train/normal/{counter:04d}.png"
        imageio.save_grayscale(img, os.path.join(out_dir, rel))
        record(rel, 0, tspec, None, tspec.seed)
        counter += 1

    for _ in range(n_normal_test):
        tspec, img = render(counter)
        rel = f"test/normal/{counter:04d}.png"
        imageio.save_grayscale(img, os.path.join(out_dir, rel))
        imageio.save_grayscale(np.zeros((height, width), np.float32),
                               os.path.join(out_dir, f"test/masks/{counter:04d}.png"))
        record(rel, 0, tspec, None, tspec.seed)
        counter += 1

    for j in range(n_anomalous_test):
        tspec, img = render(counter)
        dspec = defects[j % len(defects)]
        defect_seed = int(seeds[total + counter % total]) if total else 0
        defective, mask = inject_defect(img, dspec, seed=defect_seed)
        rel = f"test/anomalous/{counter:04d}.png"
        imageio.save_grayscale(defective, os.path.join(out_dir, rel))
        imageio.save_grayscale(mask.astype(np.float32),
                               os.path.join(out_dir, f"test/masks/{counter:04d}.png"))
        record(rel, 1, tspec, dspec, tspec.seed)
        counter += 1

    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for row in manifest:
            writer.writerow(row)
    return manifest
