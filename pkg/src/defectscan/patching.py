"""Overlapping patch decomposition and noise-map stitching.

A full image is scored patch-by-patch; the per-patch predicted-noise maps are
averaged back onto the pixel grid (arithmetic mean over every patch covering
a pixel), which keeps the Gaussian statistics of the predictions intact.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError


@dataclass(frozen=True)
class PatchGrid:
    """Anchor bookkeeping for one image: row-major (row, col) top-left corners."""

    image_h: int
    image_w: int
    patch_size: int
    stride: int
    rows: tuple
    cols: tuple

    @classmethod
    def build(cls, image_h, image_w, patch_size, stride):
        if patch_size > min(image_h, image_w):
            raise ConfigurationError(
                f"patch size {patch_size} exceeds image {image_h}x{image_w}")
        if stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {stride}")
        # anchors must tile the full extent, otherwise border pixels lose coverage
        if (image_h - patch_size) % stride or (image_w - patch_size) % stride:
            raise ConfigurationError(
                f"stride {stride} does not tile {image_h}x{image_w} with "
                f"patch {patch_size}; (dim - patch) must be divisible by stride")
        rows = tuple(range(0, image_h - patch_size + 1, stride))
        cols = tuple(range(0, image_w - patch_size + 1, stride))
        return cls(image_h, image_w, patch_size, stride, rows, cols)

    @property
    def positions(self):
        return [(r, c) for r in self.rows for c in self.cols]

    def __len__(self):
        return len(self.rows) * len(self.cols)

    def coverage(self):
        """How many patches cover each pixel, as an int32 [H, W] map."""
        cov = np.zeros((self.image_h, self.image_w), dtype=np.int32)
        p, s = self.patch_size, self.stride
        gh, gw = len(self.rows), len(self.cols)
        for dy in range(p):
            for dx in range(p):
                cov[dy:dy + gh * s:s, dx:dx + gw * s:s] += 1
        return cov


@dataclass
class StitchedMap:
    """Per-pixel mean of overlapping patch values plus the coverage counts."""

    values: np.ndarray
    coverage: np.ndarray


def extract_patches(image, patch_size, stride=1):
    """Slice an [H, W] image into overlapping patches.

    Returns (grid, patches) where patches is float32 [n, p, p] in row-major
    anchor order and patches[k] equals image[r:r+p, c:c+p] exactly.
    """
    img = np.asarray(getattr(image, "data", image), dtype=np.float32)
    if img.ndim != 2:
        raise ContractError(f"extract_patches: expected a 2-D image, got {img.shape}")
    grid = PatchGrid.build(img.shape[0], img.shape[1], patch_size, stride)
    win = np.lib.stride_tricks.sliding_window_view(img, (patch_size, patch_size))
    patches = win[::stride, ::stride].reshape(-1, patch_size, patch_size).copy()
    return grid, patches


def stitch_noise_map(grid, patch_maps):
    """Average per-patch maps back onto the image grid.

    values[y, x] is the arithmetic mean over all patches covering (y, x);
    coverage records the count.
    """
    maps = np.asarray(patch_maps, dtype=np.float32)
    p, s = grid.patch_size, grid.stride
    gh, gw = len(grid.rows), len(grid.cols)
    if maps.shape != (gh * gw, p, p):
        raise ContractError(
            f"stitch: got {maps.shape}, expected ({gh * gw}, {p}, {p}) for this grid")
    tiles = maps.reshape(gh, gw, p, p)
    sums = np.zeros((grid.image_h, grid.image_w), dtype=np.float64)
    for dy in range(p):
        for dx in range(p):
            sums[dy:dy + gh * s:s, dx:dx + gw * s:s] += tiles[:, :, dy, dx]
    coverage = grid.coverage()
    values = (sums / coverage).astype(np.float32)
    return StitchedMap(values=values, coverage=coverage)


class PatchDataset:
    """Lazy patch view over a stack of same-sized images.

    Stores the images once and materializes patches per batch, so a
    stride-1 corpus (5,329 patches per 100x100 image) stays cheap in memory.
    """

    def __init__(self, images, patch_size, stride=1):
        self.images = np.asarray(images, dtype=np.float32)
        if self.images.ndim != 3:
            raise ContractError(f"PatchDataset: expected [M, H, W], got {self.images.shape}")
        m, h, w = self.images.shape
        self.grid = PatchGrid.build(h, w, patch_size, stride)
        self.patch_size = patch_size
        self._anchors = np.array(self.grid.positions, dtype=np.int64)

    def __len__(self):
        return self.images.shape[0] * len(self._anchors)

    @property
    def patches_per_image(self):
        return len(self._anchors)

    def gather(self, indices):
        """Materialize patches for flat indices as a float32 [B, 1, p, p] batch."""
        idx = np.asarray(indices, dtype=np.int64)
        per = len(self._anchors)
        p = self.patch_size
        out = np.empty((idx.size, 1, p, p), dtype=np.float32)
        for j, k in enumerate(idx):
            img = self.images[k // per]
            r, c = self._anchors[k % per]
            out[j, 0] = img[r:r + p, c:c + p]
        return out
