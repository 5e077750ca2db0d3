"""Edge-energy features and pixel-level heatmaps from a stitched noise map.

Pipeline: blur the map (Gaussian or uniform), run Sobel edge detection, then
summarize as a 2-D descriptor: the global L2 norm of the edge map and the
maximum L2 norm over a sliding window.  The same blurred Sobel map doubles as
the localization heatmap.
"""

from dataclasses import dataclass

import numpy as np

from . import imageio
from .errors import ConfigurationError, ContractError

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


@dataclass(frozen=True)
class FeatureVector:
    """(global, local) edge-energy descriptor of one image."""

    global_l2: float
    local_max_l2: float

    def as_array(self):
        return np.array([self.global_l2, self.local_max_l2], dtype=np.float64)


@dataclass
class HeatMap:
    """Nonnegative anomaly intensities plus the display scaling actually used."""

    values: np.ndarray
    vmin: float
    vmax: float


@dataclass(frozen=True)
class FeatureParams:
    blur_kind: str = "gaussian"
    blur_radius: int = 2
    blur_sigma: float = 1.0
    window: int = 20
    window_stride: int = 5


def gaussian_kernel(radius, sigma):
    """(2r+1)^2 kernel with weights summing to exactly 1."""
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    k1 = np.exp(-0.5 * (ax / sigma) ** 2)
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


def _correlate(img, kernel):
    """Dense correlation with reflect padding; kernel must be odd-sized square."""
    r = kernel.shape[0] // 2
    padded = np.pad(np.asarray(img, dtype=np.float64), r, mode="reflect")
    out = np.zeros(img.shape, dtype=np.float64)
    h, w = img.shape
    for dy in range(kernel.shape[0]):
        for dx in range(kernel.shape[1]):
            if kernel[dy, dx] != 0.0:
                out += kernel[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return out


def blur(values, kind="gaussian", radius=2, sigma=1.0):
    """Smooth a 2-D map with a normalized Gaussian or uniform kernel.

    Reflect padding keeps constant maps exactly constant.
    """
    m = np.asarray(getattr(values, "values", values), dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"blur: expected a 2-D map, got {m.shape}")
    if radius < 1:
        raise ConfigurationError(f"blur radius must be >= 1, got {radius}")
    if radius >= min(m.shape):
        # reflect padding needs pad < extent on both axes
        raise ConfigurationError(f"blur radius {radius} too large for map {m.shape}")
    if kind == "gaussian":
        if sigma <= 0:
            raise ConfigurationError(f"gaussian blur needs sigma > 0, got {sigma}")
        kernel = gaussian_kernel(radius, sigma)
    elif kind == "uniform":
        size = 2 * radius + 1
        kernel = np.full((size, size), 1.0 / size ** 2)
    else:
        raise ConfigurationError(f"unknown blur kind {kind!r}; use 'gaussian' or 'uniform'")
    return _correlate(m, kernel).astype(np.float32)


def sobel(values):
    """Edge magnitude sqrt(Gx^2 + Gy^2) with the standard 3x3 kernels."""
    m = np.asarray(getattr(values, "values", values), dtype=np.float64)
    if m.ndim != 2 or min(m.shape) < 3:
        raise ContractError(f"sobel: need a 2-D map at least 3x3, got {m.shape}")
    gx = _correlate(m, SOBEL_X)
    gy = _correlate(m, SOBEL_Y)
    return np.sqrt(gx * gx + gy * gy).astype(np.float32)


def global_l2(values):
    """Total energy sqrt(sum of squares)."""
    m = np.asarray(getattr(values, "values", values), dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def local_max_l2(values, window=20, stride=5):
    """Max windowed L2 norm over anchors every `stride` pixels (tail included)."""
    m = np.asarray(getattr(values, "values", values), dtype=np.float64)
    h, w = m.shape
    if window > min(h, w):
        raise ConfigurationError(f"window {window} exceeds map {h}x{w}")
    if not 1 <= stride <= window:
        # stride above the window width would skip pixels entirely
        raise ConfigurationError(f"window stride must be in [1, {window}], got {stride}")
    sq = np.zeros((h + 1, w + 1), dtype=np.float64)
    sq[1:, 1:] = np.cumsum(np.cumsum(m * m, axis=0), axis=1)

    def anchors(extent):
        pts = list(range(0, extent - window + 1, stride))
        if pts[-1] != extent - window:
            pts.append(extent - window)
        return pts

    best = 0.0
    for r in anchors(h):
        for c in anchors(w):
            s = sq[r + window, c + window] - sq[r, c + window] - sq[r + window, c] + sq[r, c]
            if s > best:
                best = s
    return float(np.sqrt(max(best, 0.0)))


def extract_feature_vector(noise_map, params=FeatureParams()):
    """blur -> Sobel -> (global L2, max windowed L2)."""
    edges = sobel(blur(noise_map, params.blur_kind, params.blur_radius, params.blur_sigma))
    return FeatureVector(
        global_l2=global_l2(edges),
        local_max_l2=local_max_l2(edges, params.window, params.window_stride),
    )


def pixel_heatmap(noise_map, params=FeatureParams()):
    """Localization map: Sobel magnitude of the blurred noise map, raw values kept."""
    edges = sobel(blur(noise_map, params.blur_kind, params.blur_radius, params.blur_sigma))
    _, vmin, vmax = imageio.display_normalize(edges)
    return HeatMap(values=edges, vmin=vmin, vmax=vmax)


def save_heatmap(heatmap, png_path, raw_path=None):
    """Export: display-normalized 8-bit PNG plus optional raw float32 .npy."""
    scaled, _, _ = imageio.display_normalize(heatmap.values)
    imageio.save_grayscale(scaled, png_path)
    if raw_path is not None:
        np.save(raw_path, heatmap.values.astype(np.float32))
