"""Image quality metrics and the complexity/energy figures for reports.

PSNR uses peak 1.0 (images are windowed to [0, 1] before comparison) and
returns +inf for identical inputs. SSIM follows the standard 11x11
Gaussian-window formulation with sigma 1.5, K1 = 0.01, K2 = 0.03 and unit
data range. Energy per inference is defined as GFLOPs divided by 20.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.signal import correlate2d

from .errors import DimensionError, UsageError
from .preprocess import Image2D

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    """Quality plus complexity summary for one model/dataset combination."""

    psnr_db: float
    ssim: float
    rmse: float
    params_m: float
    gflops: float
    energy_per_inference: float


def build_report(psnr_db: float, ssim_value: float, rmse_value: float,
                 params_m: float, gflops: float) -> MetricReport:
    """Assemble a report; the energy figure is always gflops / 20."""
    return MetricReport(psnr_db=psnr_db, ssim=ssim_value, rmse=rmse_value,
                        params_m=params_m, gflops=gflops,
                        energy_per_inference=energy_per_inference(gflops))


def _paired(a: Image2D, b: Image2D, op: str) -> tuple[np.ndarray, np.ndarray]:
    if a.values.shape != b.values.shape:
        raise DimensionError(
            f"{op}: image shapes differ: {a.values.shape} vs {b.values.shape}"
        )
    return a.values.astype(np.float64), b.values.astype(np.float64)


def psnr(a: Image2D, b: Image2D) -> float:
    """Peak signal-to-noise ratio in dB against peak 1.0; inf when identical."""
    x, y = _paired(a, b, "psnr")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def rmse(a: Image2D, b: Image2D) -> float:
    """Root mean square difference."""
    x, y = _paired(a, b, "rmse")
    return float(np.sqrt(np.mean((x - y) ** 2)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a: Image2D, b: Image2D) -> float:
    """Mean local structural similarity over valid 11x11 window positions."""
    x, y = _paired(a, b, "ssim")
    if min(x.shape) < SSIM_WINDOW:
        raise UsageError(
            f"ssim: image dims {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x = correlate2d(x, win, mode="valid")
    mu_y = correlate2d(y, win, mode="valid")
    xx = correlate2d(x * x, win, mode="valid")
    yy = correlate2d(y * y, win, mode="valid")
    xy = correlate2d(x * y, win, mode="valid")
    var_x = xx - mu_x ** 2
    var_y = yy - mu_y ** 2
    cov = xy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def energy_per_inference(gflops: float) -> float:
    """Energy figure used in complexity reports: GFLOPs divided by 20."""
    if gflops < 0:
        raise UsageError(f"energy_per_inference: gflops must be >= 0, got {gflops}")
    return gflops / 20.0


def format_metric(value: float) -> str:
    """Render a metric for reports; infinities become the string 'inf'."""
    if math.isinf(value):
        return "inf"
    return f"{value:.6f}"


def aggregate(values: Iterable[float]) -> tuple[float, float]:
    """Mean and sample std, excluding non-finite entries (e.g. inf PSNR)."""
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return math.nan, math.nan
    mean = float(np.mean(finite))
    std = float(np.std(finite, ddof=1)) if len(finite) > 1 else 0.0
    return mean, std
