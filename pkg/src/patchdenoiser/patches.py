"""Multi-scale patch geometry: planning, extraction, tiling, reassembly.

Each scale divides the (padded) image by one divisor into a non-overlapping
grid of patches. Feature maps produced per patch at half resolution tile
back into one aligned map per scale, so every scale lands on the same
(H/2, W/2) canvas and can be fused pixel-by-pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, IntegrityError, UsageError
from .preprocess import Image2D

DEFAULT_DIVISORS = (16, 8, 1)


@dataclass(frozen=True)
class PatchPlan:
    """Derived patch geometry for one image size and divisor ladder."""

    image_h: int
    image_w: int
    padded_h: int
    padded_w: int
    divisors: tuple[int, ...]
    patch_sizes: tuple[tuple[int, int], ...]
    grid_dims: tuple[tuple[int, int], ...]

    @property
    def n_scales(self) -> int:
        return len(self.divisors)


@dataclass
class PatchSet:
    """Position-indexed non-overlapping patches of one image at one scale."""

    scale_index: int
    patch_size: tuple[int, int]
    patches: np.ndarray              # (n, ph, pw), row-major position order
    positions: list[tuple[int, int]]  # grid (row, col) per patch
    plan: PatchPlan
    range_tag: str


def _padded_extent(dim: int, unit: int) -> int:
    return unit * math.ceil(dim / unit)


def plan_scales(h: int, w: int, divisors: Sequence[int] = DEFAULT_DIVISORS) -> PatchPlan:
    """Plan the per-scale patch grid for an h-by-w image.

    Dimensions are padded up to the least multiple of 2*lcm(divisors) so
    every patch divides the padded extent exactly AND has even sides; even
    patches are what keeps the half-resolution feature maps of all scales
    pixel-aligned. Non-square images pad each axis independently and use
    rectangular patches.
    """
    divisors = tuple(int(d) for d in divisors)
    if not divisors:
        raise UsageError("plan_scales: need at least one divisor")
    if any(d < 1 for d in divisors):
        raise UsageError(f"plan_scales: divisors must be >= 1, got {divisors}")
    if list(divisors) != sorted(set(divisors), reverse=True):
        raise UsageError(
            f"plan_scales: divisors must be unique and sorted descending, got {divisors}"
        )
    if h < divisors[0] or w < divisors[0]:
        raise UsageError(
            f"plan_scales: image {h}x{w} smaller than largest divisor {divisors[0]}"
        )
    unit = 2 * math.lcm(*divisors)
    ph, pw = _padded_extent(h, unit), _padded_extent(w, unit)
    patch_sizes = tuple((ph // d, pw // d) for d in divisors)
    grid_dims = tuple((d, d) for d in divisors)
    return PatchPlan(h, w, ph, pw, divisors, patch_sizes, grid_dims)


def pad_to_plan(values: np.ndarray, plan: PatchPlan) -> np.ndarray:
    """Reflect-pad a 2D array from the plan's image dims to its padded dims."""
    if values.shape != (plan.image_h, plan.image_w):
        raise DimensionError(
            f"pad_to_plan: image shape {values.shape} does not match plan "
            f"({plan.image_h}, {plan.image_w})"
        )
    dh = plan.padded_h - plan.image_h
    dw = plan.padded_w - plan.image_w
    if dh == 0 and dw == 0:
        return values
    return np.pad(values, ((0, dh), (0, dw)), mode="symmetric")


def extract_patches(img: Image2D, plan: PatchPlan, scale_index: int) -> PatchSet:
    """Split an image into the plan's non-overlapping grid at one scale.

    Accepts the original image (padded internally) or an already padded one.
    Patch (r, c) holds rows [r*ph, (r+1)*ph) and columns [c*pw, (c+1)*pw).
    """
    if not 0 <= scale_index < plan.n_scales:
        raise UsageError(
            f"extract_patches: scale_index {scale_index} outside [0, {plan.n_scales})"
        )
    v = img.values
    if v.shape == (plan.image_h, plan.image_w):
        v = pad_to_plan(v, plan)
    elif v.shape != (plan.padded_h, plan.padded_w):
        raise DimensionError(
            f"extract_patches: image shape {v.shape} matches neither the plan's "
            f"original ({plan.image_h}, {plan.image_w}) nor padded "
            f"({plan.padded_h}, {plan.padded_w}) dims"
        )
    ph, pw = plan.patch_sizes[scale_index]
    rows, cols = plan.grid_dims[scale_index]
    blocks = v.reshape(rows, ph, cols, pw).transpose(0, 2, 1, 3)
    patches = np.ascontiguousarray(blocks).reshape(rows * cols, ph, pw)
    positions = [(r, c) for r in range(rows) for c in range(cols)]
    return PatchSet(scale_index, (ph, pw), patches, positions, plan, img.range_tag)


def reassemble(patches: PatchSet) -> Image2D:
    """Inverse of extract_patches; placement is position-driven, not order-driven."""
    plan = patches.plan
    rows, cols = plan.grid_dims[patches.scale_index]
    ph, pw = patches.patch_size
    n = rows * cols
    if len(patches.positions) != len(patches.patches):
        raise IntegrityError(
            f"reassemble: {len(patches.patches)} patches but "
            f"{len(patches.positions)} positions"
        )
    seen = set(patches.positions)
    if len(seen) != len(patches.positions):
        raise IntegrityError("reassemble: duplicate patch positions")
    expected = {(r, c) for r in range(rows) for c in range(cols)}
    if seen != expected:
        missing = sorted(expected - seen)[:4]
        raise IntegrityError(f"reassemble: positions missing from grid, e.g. {missing}")
    if len(patches.patches) != n:
        raise IntegrityError(f"reassemble: expected {n} patches, got {len(patches.patches)}")
    canvas = np.empty((plan.padded_h, plan.padded_w), dtype=patches.patches.dtype)
    for patch, (r, c) in zip(patches.patches, patches.positions):
        if patch.shape != (ph, pw):
            raise DimensionError(
                f"reassemble: patch at {(r, c)} has shape {patch.shape}, expected {(ph, pw)}"
            )
        canvas[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw] = patch
    return Image2D(canvas[:plan.image_h, :plan.image_w].copy(), patches.range_tag)


# ---------------------------------------------------------------------------
# differentiable patch rearrangement used inside the model


def split_into_patch_batch(x: Tensor, patch_size: tuple[int, int]) -> Tensor:
    """(B, C, H, W) -> (B*rows*cols, C, ph, pw), row-major per image."""
    if x.data.ndim != 4:
        raise DimensionError(f"split_into_patch_batch: need 4D NCHW, got {x.data.ndim}D")
    b, c, h, w = x.shape
    ph, pw = patch_size
    if h % ph or w % pw:
        raise DimensionError(
            f"split_into_patch_batch: patch {patch_size} does not tile ({h}, {w})"
        )
    rows, cols = h // ph, w // pw
    t = ad.reshape(x, (b, c, rows, ph, cols, pw))
    t = ad.transpose(t, (0, 2, 4, 1, 3, 5))
    return ad.reshape(t, (b * rows * cols, c, ph, pw))


def tile_patch_batch(x: Tensor, grid: tuple[int, int], batch: int = 1) -> Tensor:
    """(B*rows*cols, C, ph, pw) -> (B, C, rows*ph, cols*pw); inverse of the split."""
    rows, cols = grid
    n, c, ph, pw = x.shape
    if n != batch * rows * cols:
        raise DimensionError(
            f"tile_patch_batch: {n} patches do not fill a {rows}x{cols} grid "
            f"for batch {batch}"
        )
    t = ad.reshape(x, (batch, rows, cols, c, ph, pw))
    t = ad.transpose(t, (0, 3, 1, 4, 2, 5))
    return ad.reshape(t, (batch, c, rows * ph, cols * pw))


def tile_feature_maps(features: Tensor, positions: Sequence[tuple[int, int]]) -> Tensor:
    """Tile per-patch feature maps (n, C, p, p) into one (C, R*p, S*p) map.

    The grid extent is inferred from the positions, which must cover it
    exactly once; patch order is irrelevant. Differentiable.
    """
    if features.data.ndim != 4:
        raise DimensionError(
            f"tile_feature_maps: features must be (n, C, ph, pw), got {features.data.ndim}D"
        )
    n = features.shape[0]
    if len(positions) != n:
        raise IntegrityError(
            f"tile_feature_maps: {n} feature patches but {len(positions)} positions"
        )
    pos = [tuple(p) for p in positions]
    if len(set(pos)) != n:
        raise IntegrityError("tile_feature_maps: duplicate positions")
    rows = max(r for r, _ in pos) + 1
    cols = max(c for _, c in pos) + 1
    if set(pos) != {(r, c) for r in range(rows) for c in range(cols)}:
        raise IntegrityError("tile_feature_maps: positions do not cover the grid")
    order = np.empty(n, dtype=np.intp)
    for i, (r, c) in enumerate(pos):
        order[r * cols + c] = i
    tiled = tile_patch_batch(ad.take_rows(features, order), (rows, cols), batch=1)
    _, c, th, tw = tiled.shape
    return ad.reshape(tiled, (c, th, tw))
