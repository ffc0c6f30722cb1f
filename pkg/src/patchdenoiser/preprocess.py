"""CT intensity handling and synthetic data for desk-scale experiments.

Stored pixel values become Hounsfield units through the scanner's rescale
slope/intercept, get clipped to a clinically meaningful HU window, and are
normalized to [0, 1] before entering the model. Synthetic phantoms plus
seeded Poisson/Gaussian noise stand in for paired low/full dose scans so
everything is testable without patient data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import UsageError

RANGE_TAGS = ("normalized01", "hounsfield", "raw")


@dataclass
class Image2D:
    """Single-channel float image with a value-range tag."""

    values: np.ndarray
    range_tag: str

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not np.issubdtype(self.values.dtype, np.floating):
            self.values = self.values.astype(np.float64)
        if self.values.ndim != 2:
            raise UsageError(f"Image2D: values must be 2D, got {self.values.ndim}D")
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise UsageError(f"Image2D: dims must be positive, got {self.values.shape}")
        if self.range_tag not in RANGE_TAGS:
            raise UsageError(f"Image2D: unknown range_tag {self.range_tag!r}")
        if self.range_tag == "normalized01":
            lo = float(self.values.min())
            hi = float(self.values.max())
            if lo < 0.0 or hi > 1.0:
                raise UsageError(
                    f"Image2D: normalized01 values must lie in [0,1], got [{lo}, {hi}]"
                )

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class HuWindow:
    """Closed HU interval [lo, hi] used for clipping before normalization."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise UsageError(f"HuWindow: lo must be < hi, got [{self.lo}, {self.hi}]")


ABDOMEN_WINDOW = HuWindow(-160.0, 240.0)
WIDE_WINDOW = HuWindow(-1000.0, 1000.0)


@dataclass
class SliceRecord:
    """Raw stored CT slice plus the metadata needed to rescale it."""

    pixels: np.ndarray
    rescale_slope: float
    rescale_intercept: float
    patient_id: str
    slice_index: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise UsageError(f"SliceRecord: pixels must be 2D, got shape {self.pixels.shape}")
        if not self.patient_id:
            raise UsageError("SliceRecord: patient_id must be non-empty")


def to_hounsfield(rec: SliceRecord) -> Image2D:
    """Stored pixels to HU: value * rescale_slope + rescale_intercept."""
    hu = rec.pixels.astype(np.float64) * rec.rescale_slope + rec.rescale_intercept
    return Image2D(hu, "hounsfield")


def window_normalize(img: Image2D, window: HuWindow) -> Image2D:
    """Clip values to the window, then map [lo, hi] affinely onto [0, 1]."""
    v = np.clip(img.values, window.lo, window.hi)
    out = (v - window.lo) / (window.hi - window.lo)
    return Image2D(out, "normalized01")


def denormalize(img: Image2D, window: HuWindow) -> Image2D:
    """Invert the affine part of window_normalize (clipping is lossy)."""
    if img.range_tag != "normalized01":
        raise UsageError(
            f"denormalize: expected a normalized01 image, got {img.range_tag!r}"
        )
    hu = window.lo + img.values * (window.hi - window.lo)
    return Image2D(hu, "hounsfield")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def add_poisson_noise(clean: Image2D, photon_count: float, seed: int) -> Image2D:
    """Photon-counting noise: v -> Poisson(v * photon_count) / photon_count.

    Sampling is self-contained and deterministic per seed: inversion of the
    cumulative distribution for lambda < 30, a rounded normal approximation
    above. Output is clamped back to [0, 1].
    """
    if clean.range_tag != "normalized01":
        raise UsageError("add_poisson_noise: input must be normalized01")
    if not photon_count > 0:
        raise UsageError(f"add_poisson_noise: photon_count must be > 0, got {photon_count}")
    rng = _rng(seed)
    lam = clean.values.astype(np.float64) * photon_count
    # Draw both streams unconditionally so consumption (hence determinism)
    # does not depend on the image content.
    u = rng.random(lam.shape)
    z = rng.standard_normal(lam.shape)
    counts = np.zeros_like(lam)

    small = lam < 30.0
    if small.any():
        ls = lam[small]
        us = u[small]
        k = np.zeros_like(ls)
        p = np.exp(-ls)
        cdf = p.copy()
        i = 0
        # lambda < 30 puts essentially all mass below ~130; the cap is a
        # safety net against pathological float behavior, not a truncation
        # that sampling ever reaches in practice.
        while i < 200:
            pending = us > cdf
            if not pending.any():
                break
            i += 1
            p *= ls / i
            cdf += p
            k[pending] += 1.0
        counts[small] = k
    big = ~small
    if big.any():
        lb = lam[big]
        counts[big] = np.maximum(np.rint(lb + np.sqrt(lb) * z[big]), 0.0)

    out = np.clip(counts / photon_count, 0.0, 1.0)
    return Image2D(out, "normalized01")


def add_gaussian_noise(clean: Image2D, sigma: float, seed: int) -> Image2D:
    """Additive N(0, sigma^2) noise, clamped back to [0, 1]."""
    if clean.range_tag != "normalized01":
        raise UsageError("add_gaussian_noise: input must be normalized01")
    if sigma < 0:
        raise UsageError(f"add_gaussian_noise: sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return Image2D(clean.values.copy(), "normalized01")
    rng = _rng(seed)
    noisy = clean.values + sigma * rng.standard_normal(clean.values.shape)
    return Image2D(np.clip(noisy, 0.0, 1.0), "normalized01")


_PHANTOM_BACKGROUND = 0.10
# Final band-limiting blur, in pixels; soft reconstruction kernels leave CT
# slices similarly band-limited.
_PHANTOM_SMOOTHING = 0.8


def _ellipse_coverage(yy, xx, cy, cx, a, b, theta):
    ct, st = np.cos(theta), np.sin(theta)
    xr = (xx - cx) * ct + (yy - cy) * st
    yr = -(xx - cx) * st + (yy - cy) * ct
    r = np.sqrt((xr / a) ** 2 + (yr / b) ** 2)
    # (1 - r)*min(a, b) approximates the signed pixel distance to the
    # boundary; a one-pixel ramp anti-aliases the edge.
    return np.clip((1.0 - r) * min(a, b) + 0.5, 0.0, 1.0)


def generate_phantom(height: int, width: int, n_ellipses: int, seed: int) -> Image2D:
    """Deterministic abdomen-like test image in [0, 1].

    The first ellipse is a large bright body oval; the rest are internal
    structures of varied intensity composited over it, all anti-aliased on
    a dark background. A low-amplitude smooth texture is blended in where
    ellipses cover the canvas, and a light blur band-limits the result.
    With n_ellipses == 0 the image is the uniform background.
    """
    if height < 32 or width < 32:
        raise UsageError(f"generate_phantom: dims must be >= 32, got {height}x{width}")
    if n_ellipses < 0:
        raise UsageError(f"generate_phantom: n_ellipses must be >= 0, got {n_ellipses}")
    rng = _rng(seed)
    img = np.full((height, width), _PHANTOM_BACKGROUND, dtype=np.float64)
    if n_ellipses == 0:
        return Image2D(img, "normalized01")

    yy = np.arange(height, dtype=np.float64)[:, None]
    xx = np.arange(width, dtype=np.float64)[None, :]
    coverage_any = np.zeros_like(img)
    for i in range(n_ellipses):
        if i == 0:
            cy = rng.uniform(0.47, 0.53) * height
            cx = rng.uniform(0.47, 0.53) * width
            a = rng.uniform(0.43, 0.49) * height
            b = rng.uniform(0.43, 0.49) * width
            theta = rng.uniform(0.0, np.pi)
            value = rng.uniform(0.62, 0.78)
        else:
            cy = rng.uniform(0.30, 0.70) * height
            cx = rng.uniform(0.30, 0.70) * width
            a = rng.uniform(0.06, 0.22) * min(height, width)
            b = rng.uniform(0.06, 0.22) * min(height, width)
            theta = rng.uniform(0.0, np.pi)
            value = rng.uniform(0.30, 0.95)
        cov = _ellipse_coverage(yy, xx, cy, cx, a, b, theta)
        img = img * (1.0 - cov) + value * cov
        coverage_any = np.maximum(coverage_any, cov)

    texture = np.zeros_like(img)
    for _ in range(3):
        fy = rng.uniform(2.0, 6.0) / height
        fx = rng.uniform(2.0, 6.0) / width
        phase = rng.uniform(0.0, 2.0 * np.pi)
        texture += rng.uniform(0.004, 0.012) * np.sin(2.0 * np.pi * (fy * yy + fx * xx) + phase)
    img += texture * coverage_any
    img = gaussian_filter(img, _PHANTOM_SMOOTHING, mode="nearest")
    return Image2D(np.clip(img, 0.0, 1.0), "normalized01")
