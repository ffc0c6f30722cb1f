"""The three-stage denoising network plus parameter/FLOP accounting.

Stage one runs an independent convolutional feature extractor over the
patches of each scale, producing per-patch feature maps at half the patch
resolution. Stage two tiles those maps back into spatially aligned
full-extent maps and fuses them, small scale into large, through a learned
sigmoid gate (or plain concatenation for the ablation arm). Stage three is
a light conv + 2x-upsample head that restores full resolution and cleans
up patch-boundary seams.

Small patches see little context, so their extractor is deeper with a
narrower latent; the full-image scale is shallower and wider with a large
initial kernel. Each extractor has exactly one stride-2 layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, UsageError
from .patches import (PatchPlan, pad_to_plan, plan_scales,
                      split_into_patch_batch, tile_patch_batch)
from .preprocess import Image2D

FUSION_MODES = ("gated", "concat")

MIN_IMAGE_DIM = 32


@dataclass(frozen=True)
class ScaleConfig:
    """Hyperparameters of one scale's patch feature extractor."""

    divisor: int
    initial_kernel: int
    depth: int
    latent_channels: int
    downsample_layer_index: int = 1

    def __post_init__(self):
        if self.divisor < 1:
            raise ConfigError(f"ScaleConfig: divisor must be >= 1, got {self.divisor}")
        if self.initial_kernel < 1 or self.initial_kernel % 2 == 0:
            raise ConfigError(
                f"ScaleConfig: initial_kernel must be odd and positive, got {self.initial_kernel}"
            )
        if self.depth < 2:
            raise ConfigError(f"ScaleConfig: depth must be >= 2, got {self.depth}")
        if not 0 <= self.downsample_layer_index < self.depth:
            raise ConfigError(
                f"ScaleConfig: downsample_layer_index {self.downsample_layer_index} "
                f"outside [0, {self.depth})"
            )
        if self.latent_channels < 1:
            raise ConfigError(
                f"ScaleConfig: latent_channels must be >= 1, got {self.latent_channels}"
            )


@dataclass(frozen=True)
class ModelConfig:
    """Full architecture description; scales ordered small patch to large."""

    scales: tuple[ScaleConfig, ...]
    fusion_channels: int
    consolidator_channels: int
    fusion_mode: str = "gated"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(self.scales))
        if not self.scales:
            raise ConfigError("ModelConfig: need at least one scale")
        divisors = [s.divisor for s in self.scales]
        if divisors != sorted(set(divisors), reverse=True):
            raise ConfigError(
                f"ModelConfig: scale divisors must be unique and descending, got {divisors}"
            )
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(
                f"ModelConfig: fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}"
            )
        if self.fusion_channels < 1 or self.consolidator_channels < 1:
            raise ConfigError("ModelConfig: channel widths must be >= 1")

    @property
    def divisors(self) -> tuple[int, ...]:
        return tuple(s.divisor for s in self.scales)


def default_config(seed: int = 0, fusion_mode: str = "gated",
                   divisors: Sequence[int] = (16, 8, 1)) -> ModelConfig:
    """Reference three-scale architecture (about 62k parameters).

    Kernel 3/7/11, depth 5/4/3, width 16/24/32 from the smallest patch to
    the full image; any descending three-divisor ladder reuses the same
    per-rank settings.
    """
    return _ladder_config(divisors, depths=(5, 4, 3), widths=(16, 24, 32),
                          fusion_channels=32, consolidator_channels=16,
                          fusion_mode=fusion_mode, seed=seed)


def toy_config(seed: int = 0, fusion_mode: str = "gated",
               divisors: Sequence[int] = (16, 8, 1)) -> ModelConfig:
    """Slimmed-down architecture for desk-scale CPU training runs."""
    return _ladder_config(divisors, depths=(3, 3, 2), widths=(8, 12, 16),
                          fusion_channels=16, consolidator_channels=8,
                          fusion_mode=fusion_mode, seed=seed)


def _ladder_config(divisors, depths, widths, fusion_channels,
                   consolidator_channels, fusion_mode, seed) -> ModelConfig:
    divisors = tuple(int(d) for d in divisors)
    if len(divisors) != 3:
        raise ConfigError(f"expected a three-divisor ladder, got {divisors}")
    kernels = (3, 7, 11)
    scales = tuple(
        ScaleConfig(divisor=d, initial_kernel=k, depth=dep, latent_channels=wid)
        for d, k, dep, wid in zip(divisors, kernels, depths, widths)
    )
    return ModelConfig(scales=scales, fusion_channels=fusion_channels,
                       consolidator_channels=consolidator_channels,
                       fusion_mode=fusion_mode, seed=seed)


@dataclass
class ModelWeights:
    """Named parameter tensors plus the config they were built from."""

    tensors: dict[str, Tensor]
    config: ModelConfig

    def parameters(self) -> list[Tensor]:
        return [self.tensors[name] for name in sorted(self.tensors)]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


@dataclass(frozen=True)
class _LayerSpec:
    name: str
    out_channels: int
    in_channels: int
    kernel: int
    stride: int


def _layer_specs(config: ModelConfig) -> Iterator[_LayerSpec]:
    """Every conv layer in build order; single source of truth for counting."""
    for si, sc in enumerate(config.scales):
        for li in range(sc.depth):
            yield _LayerSpec(
                name=f"extract{si}.conv{li}",
                out_channels=sc.latent_channels,
                in_channels=1 if li == 0 else sc.latent_channels,
                kernel=sc.initial_kernel if li == 0 else 3,
                stride=2 if li == sc.downsample_layer_index else 1,
            )
    f = config.fusion_channels
    for si, sc in enumerate(config.scales):
        yield _LayerSpec(f"fuse.project{si}", f, sc.latent_channels, 1, 1)
    if config.fusion_mode == "gated":
        for j in range(len(config.scales) - 1):
            yield _LayerSpec(f"fuse.gate{j}", f, 2 * f, 1, 1)
    else:
        yield _LayerSpec("fuse.reduce", f, len(config.scales) * f, 1, 1)
    c = config.consolidator_channels
    yield _LayerSpec("head.conv0", c, f, 3, 1)
    yield _LayerSpec("head.conv1", c, c, 3, 1)
    yield _LayerSpec("head.conv2", 1, c, 3, 1)


def build_model(config: ModelConfig, dtype=np.float32) -> ModelWeights:
    """Materialize weights: uniform +-sqrt(6/fan_in) draws, zero biases.

    Initialization is a pure function of config.seed; the same seed gives
    bit-identical weights.
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    tensors: dict[str, Tensor] = {}
    for spec in _layer_specs(config):
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        limit = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit,
                        (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
        tensors[f"{spec.name}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
        tensors[f"{spec.name}.bias"] = Tensor(
            np.zeros(spec.out_channels, dtype=dtype), requires_grad=True)
    return ModelWeights(tensors=tensors, config=config)


def count_params(config: ModelConfig) -> int:
    """Analytic parameter count: sum of K^2*Cin*Cout + Cout over all layers."""
    return sum(
        s.kernel * s.kernel * s.in_channels * s.out_channels + s.out_channels
        for s in _layer_specs(config)
    )


def _conv(weights: ModelWeights, name: str, x: Tensor, stride: int, kernel: int) -> Tensor:
    return ad.conv2d(x, weights.tensors[f"{name}.weight"],
                     weights.tensors[f"{name}.bias"],
                     stride=stride, padding=kernel // 2)


def extract_features(weights: ModelWeights, patch_batch: Tensor,
                     scale_index: int) -> Tensor:
    """Run one scale's extractor over a batch of patches.

    Input (N, 1, P, Q) with even P, Q; output (N, C, P/2, Q/2). Same-padded
    convs everywhere; one stride-2 layer halves the resolution; relu after
    every layer but the last.
    """
    config = weights.config
    if not 0 <= scale_index < len(config.scales):
        raise UsageError(
            f"extract_features: scale_index {scale_index} outside "
            f"[0, {len(config.scales)})"
        )
    if patch_batch.data.ndim != 4 or patch_batch.shape[1] != 1:
        raise DimensionError(
            f"extract_features: patches must be (N, 1, P, Q), got {patch_batch.shape}"
        )
    if patch_batch.shape[2] % 2 or patch_batch.shape[3] % 2:
        raise DimensionError(
            f"extract_features: patch dims must be even to halve exactly, "
            f"got {patch_batch.shape[2:]}"
        )
    sc = config.scales[scale_index]
    x = patch_batch
    for li in range(sc.depth):
        kernel = sc.initial_kernel if li == 0 else 3
        stride = 2 if li == sc.downsample_layer_index else 1
        x = _conv(weights, f"extract{scale_index}.conv{li}", x, stride, kernel)
        if li < sc.depth - 1:
            x = ad.relu(x)
    return x


def _one_minus(x: Tensor) -> Tensor:
    ones = Tensor(np.ones_like(x.data))
    return ad.add(ones, ad.scale(x, -1.0))


def fuse_feature_maps(weights: ModelWeights, tiled_maps: Sequence[Tensor],
                      mode: str | None = None) -> Tensor:
    """Fuse spatially aligned per-scale maps into one fusion-width map.

    Every map is first projected to the fusion width by a 1x1 conv. Gated
    mode then folds maps in small-to-large order: with accumulated A and
    next map B, a sigmoid gate g = sig(conv1x1([A, B])) blends
    g*A + (1-g)*B, so zeroed gate parameters average the two. Concat mode
    stacks all projections and reduces them with a single 1x1 conv.
    """
    config = weights.config
    mode = config.fusion_mode if mode is None else mode
    if mode not in FUSION_MODES:
        raise UsageError(f"fuse_feature_maps: unknown mode {mode!r}")
    if len(tiled_maps) != len(config.scales):
        raise DimensionError(
            f"fuse_feature_maps: got {len(tiled_maps)} maps for "
            f"{len(config.scales)} scales"
        )
    spatial = tiled_maps[0].shape[2:]
    for i, t in enumerate(tiled_maps):
        if t.data.ndim != 4:
            raise DimensionError(f"fuse_feature_maps: map {i} must be 4D NCHW")
        if t.shape[2:] != spatial:
            raise DimensionError(
                f"fuse_feature_maps: map {i} spatial dims {t.shape[2:]} do not "
                f"match {spatial} (axes 2, 3)"
            )
    projected = [
        _conv(weights, f"fuse.project{si}", t, stride=1, kernel=1)
        for si, t in enumerate(tiled_maps)
    ]
    if mode == "concat":
        return _conv(weights, "fuse.reduce", ad.concat(projected, axis=1),
                     stride=1, kernel=1)
    acc = projected[0]
    for j, nxt in enumerate(projected[1:]):
        gate = ad.sigmoid(
            _conv(weights, f"fuse.gate{j}", ad.concat([acc, nxt], axis=1),
                  stride=1, kernel=1)
        )
        acc = ad.add(ad.mul(gate, acc), ad.mul(_one_minus(gate), nxt))
    return acc


def consolidate(weights: ModelWeights, fused: Tensor) -> Tensor:
    """Restore full resolution: conv+relu, 2x upsample, conv+relu, linear conv.

    Output is unclamped so training gradients flow; inference-time clamping
    happens in denoise_image.
    """
    x = ad.relu(_conv(weights, "head.conv0", fused, stride=1, kernel=3))
    x = ad.upsample2x(x)
    x = ad.relu(_conv(weights, "head.conv1", x, stride=1, kernel=3))
    return _conv(weights, "head.conv2", x, stride=1, kernel=3)


def forward_full(weights: ModelWeights, x: Tensor, plan: PatchPlan) -> Tensor:
    """Whole pipeline on a padded batch (B, 1, Hp, Wp) -> (B, 1, Hp, Wp)."""
    config = weights.config
    if plan.divisors != config.divisors:
        raise ConfigError(
            f"forward_full: plan divisors {plan.divisors} do not match "
            f"model divisors {config.divisors}"
        )
    if x.shape[2] != plan.padded_h or x.shape[3] != plan.padded_w:
        raise DimensionError(
            f"forward_full: input spatial dims {x.shape[2:]} do not match "
            f"plan's padded ({plan.padded_h}, {plan.padded_w})"
        )
    batch = x.shape[0]
    maps = []
    for si in range(plan.n_scales):
        pb = split_into_patch_batch(x, plan.patch_sizes[si])
        feats = extract_features(weights, pb, si)
        maps.append(tile_patch_batch(feats, plan.grid_dims[si], batch=batch))
    fused = fuse_feature_maps(weights, maps)
    return consolidate(weights, fused)


def denoise_image(weights: ModelWeights, img: Image2D) -> Image2D:
    """Denoise one normalized image; output is clamped back to [0, 1]."""
    if img.range_tag != "normalized01":
        raise UsageError(f"denoise_image: input must be normalized01, got {img.range_tag!r}")
    if img.height < MIN_IMAGE_DIM or img.width < MIN_IMAGE_DIM:
        raise UsageError(
            f"denoise_image: image must be at least {MIN_IMAGE_DIM} px per side, "
            f"got {img.height}x{img.width}"
        )
    plan = plan_scales(img.height, img.width, weights.config.divisors)
    dtype = next(iter(weights.tensors.values())).dtype
    padded = pad_to_plan(img.values, plan).astype(dtype)
    with ad.no_grad():
        out = forward_full(weights, Tensor(padded[None, None]), plan)
    values = out.data[0, 0, :img.height, :img.width]
    return Image2D(np.clip(values, 0.0, 1.0).astype(np.float64), "normalized01")


_UPSAMPLE_FLOPS_PER_PIXEL = 8


def count_flops(config: ModelConfig, h: int, w: int) -> float:
    """Inference cost in GFLOPs for one h-by-w image.

    Convolutions count 2*K^2*Cin*Cout per output element (multiply and
    accumulate) times the per-scale patch count; upsampling counts 8 FLOPs
    per output element. Elementwise gating is ignored as negligible.
    Spatial dims are the plan's padded ones, since that is what actually
    runs.
    """
    plan = plan_scales(h, w, config.divisors)
    total = 0.0
    for si, sc in enumerate(config.scales):
        rows, cols = plan.grid_dims[si]
        ph, pw = plan.patch_sizes[si]
        n_patches = rows * cols
        oh, ow = ph, pw
        for li in range(sc.depth):
            kernel = sc.initial_kernel if li == 0 else 3
            cin = 1 if li == 0 else sc.latent_channels
            if li == sc.downsample_layer_index:
                oh, ow = oh // 2, ow // 2
            total += 2.0 * kernel * kernel * cin * sc.latent_channels * oh * ow * n_patches
    h2, w2 = plan.padded_h // 2, plan.padded_w // 2
    f = config.fusion_channels
    for sc in config.scales:
        total += 2.0 * sc.latent_channels * f * h2 * w2
    if config.fusion_mode == "gated":
        total += (len(config.scales) - 1) * 2.0 * (2 * f) * f * h2 * w2
    else:
        total += 2.0 * (len(config.scales) * f) * f * h2 * w2
    c = config.consolidator_channels
    total += 2.0 * 9 * f * c * h2 * w2
    total += float(_UPSAMPLE_FLOPS_PER_PIXEL) * c * plan.padded_h * plan.padded_w
    total += 2.0 * 9 * c * c * plan.padded_h * plan.padded_w
    total += 2.0 * 9 * c * 1 * plan.padded_h * plan.padded_w
    return total / 1e9
