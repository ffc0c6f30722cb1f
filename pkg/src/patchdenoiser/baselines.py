"""Classical denoising filters used as report baselines.

Mean, median, and Gaussian window filters plus a shift-vectorized
non-local means. All filters reflect-pad at the borders and preserve the
input shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, median_filter, uniform_filter

from .errors import UsageError
from .preprocess import Image2D

FILTER_KINDS = ("mean", "median", "gaussian", "nlm")

# Non-local means filtering strength relative to the noise level; the
# classic recipe keeps h proportional to sigma.
NLM_STRENGTH_FACTOR = 0.75


@dataclass(frozen=True)
class FilterSpec:
    """Parameters of one classical filter.

    ``sigma`` is the spatial smoothing std in pixels for the gaussian
    filter, and the noise std in intensity units for non-local means.
    """

    kind: str
    window: int = 3
    sigma: float = 1.0
    search_radius: int = 5
    patch_radius: int = 1

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise UsageError(f"FilterSpec: unknown kind {self.kind!r}")
        if self.window < 3 or self.window % 2 == 0:
            raise UsageError(f"FilterSpec: window must be odd and >= 3, got {self.window}")


def apply_filter(img: Image2D, spec: FilterSpec) -> Image2D:
    """Run the selected filter; reflect padding, same output shape."""
    v = img.values
    if spec.window > min(v.shape):
        raise UsageError(
            f"apply_filter: window {spec.window} exceeds image dims {v.shape}"
        )
    if spec.kind == "mean":
        out = uniform_filter(v, size=spec.window, mode="reflect")
    elif spec.kind == "median":
        out = median_filter(v, size=spec.window, mode="reflect")
    elif spec.kind == "gaussian":
        if spec.sigma <= 0:
            raise UsageError(f"apply_filter: gaussian sigma must be > 0, got {spec.sigma}")
        radius = (spec.window - 1) // 2
        out = gaussian_filter(v, sigma=spec.sigma, mode="reflect", radius=radius)
    else:
        return nlm_denoise(img, spec)
    return Image2D(out, img.range_tag)


def nlm_denoise(img: Image2D, spec: FilterSpec) -> Image2D:
    """Non-local means: average shifted copies weighted by patch similarity.

    For every offset within the search window, the per-pixel mean squared
    patch distance d2 is box-filtered from the shifted difference image and
    weighted exp(-max(d2 - 2*sigma^2, 0) / h^2) with h proportional to
    sigma. The zero offset always carries weight 1.
    """
    if spec.patch_radius < 1 or spec.search_radius < spec.patch_radius:
        raise UsageError(
            f"nlm_denoise: need search_radius >= patch_radius >= 1, got "
            f"search {spec.search_radius}, patch {spec.patch_radius}"
        )
    v = img.values.astype(np.float64)
    r_search = spec.search_radius
    r_patch = spec.patch_radius
    patch_size = 2 * r_patch + 1
    sigma2 = 2.0 * spec.sigma ** 2
    h = NLM_STRENGTH_FACTOR * spec.sigma
    h2 = max(h * h, 1e-12)

    pad = r_search + r_patch
    padded = np.pad(v, pad, mode="symmetric")
    n_rows, n_cols = v.shape
    # Work on the search-padded frame so border pixels see full windows.
    core = padded[r_patch:-r_patch, r_patch:-r_patch] if r_patch else padded
    weight_sum = np.zeros_like(core)
    value_sum = np.zeros_like(core)
    for dy in range(-r_search, r_search + 1):
        for dx in range(-r_search, r_search + 1):
            shifted = np.roll(np.roll(padded, -dy, axis=0), -dx, axis=1)
            diff2 = (padded - shifted) ** 2
            d2 = uniform_filter(diff2, size=patch_size, mode="constant")
            d2 = d2[r_patch:-r_patch, r_patch:-r_patch] if r_patch else d2
            w = np.exp(-np.maximum(d2 - sigma2, 0.0) / h2)
            sh = shifted[r_patch:-r_patch, r_patch:-r_patch] if r_patch else shifted
            weight_sum += w
            value_sum += w * sh
    out = value_sum / weight_sum
    out = out[r_search:r_search + n_rows, r_search:r_search + n_cols]
    return Image2D(out, img.range_tag)
