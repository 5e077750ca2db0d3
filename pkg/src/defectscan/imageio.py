"""PNG ingestion and export (8-bit grayscale on disk, floats in memory)."""

import numpy as np
from PIL import Image

from .errors import ContractError


def load_grayscale(path, size=None):
    """Read an image as float32 [H, W] in [0, 1]; color inputs convert via luma.

    When `size` is given the image is bilinearly resized to (size, size).
    """
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr


def save_grayscale(arr01, path):
    """Write a [0, 1] float array as an 8-bit grayscale PNG (deterministic bytes)."""
    arr = np.asarray(arr01, dtype=np.float32)
    if arr.ndim != 2:
        raise ContractError(f"save_grayscale: expected 2-D array, got {arr.shape}")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path, format="PNG")


def to_model_range(arr01):
    """[0, 1] pixels -> [-1, 1] model inputs."""
    return (np.asarray(arr01, dtype=np.float32) * 2.0 - 1.0).astype(np.float32)


def display_normalize(values):
    """Scale an arbitrary float map to [0, 1] for export; returns (scaled, vmin, vmax)."""
    v = np.asarray(values, dtype=np.float32)
    vmin, vmax = float(v.min()), float(v.max())
    if vmax - vmin < 1e-12:
        return np.zeros_like(v), vmin, vmax
    return (v - vmin) / (vmax - vmin), vmin, vmax
