"""Training loop, patient-wise fold splitting, and checkpointing.

Training hyperparameters default to the production recipe: batch size 1
for 80 epochs under Adam with a single cosine cycle from 1e-2 down to
1e-2/160. Every source of randomness derives from an explicit seed, so a
repeated run reproduces the loss trace bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, l1_loss
from .errors import (ConfigError, DimensionError, DivergedError,
                     IntegrityError, UsageError)
from .metrics import aggregate, psnr, ssim
from .model import (ModelConfig, ModelWeights, ScaleConfig, build_model,
                    denoise_image, forward_full)
from .optim import AdamState, CosineSchedule, adam_step, lr_at
from .patches import pad_to_plan, plan_scales
from .preprocess import ABDOMEN_WINDOW, HuWindow, Image2D


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe; defaults follow the production schedule."""

    epochs: int = 80
    batch_size: int = 1
    eta0: float = 1e-2
    eta_min: float = 1e-2 / 160
    seed: int = 0
    hu_window: HuWindow = ABDOMEN_WINDOW

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"TrainConfig: epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"TrainConfig: batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class FoldSplit:
    """One cross-validation fold; patients never straddle the boundary."""

    fold_index: int
    train_patients: tuple[str, ...]
    val_patients: tuple[str, ...]


def split_folds(patient_ids: Sequence[str], k: int, seed: int) -> list[FoldSplit]:
    """Patient-wise k-fold split: seeded shuffle, then contiguous partition.

    Every patient lands in exactly one fold's validation set.
    """
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        raise UsageError("split_folds: patient_ids contain duplicates")
    if k < 1:
        raise UsageError(f"split_folds: k must be >= 1, got {k}")
    if k > len(ids):
        raise UsageError(f"split_folds: k={k} exceeds {len(ids)} patients")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = [ids[i] for i in rng.permutation(len(ids))]
    chunks = np.array_split(np.arange(len(order)), k)
    folds = []
    for fi, chunk in enumerate(chunks):
        val = tuple(order[i] for i in chunk)
        train = tuple(p for p in order if p not in set(val))
        folds.append(FoldSplit(fold_index=fi, train_patients=train, val_patients=val))
    return folds


@dataclass
class TraceRow:
    """One epoch of the loss trace; val metrics are NaN when no val set."""

    epoch: int
    lr: float
    train_loss: float
    val_psnr: float
    val_ssim: float


@dataclass
class TrainResult:
    weights: ModelWeights
    trace: list[TraceRow]


def _stack_pairs(pairs: Sequence[tuple[Image2D, Image2D]], plan, dtype):
    noisy = np.stack([pad_to_plan(n.values, plan) for n, _ in pairs])
    clean = np.stack([pad_to_plan(c.values, plan) for _, c in pairs])
    return noisy[:, None].astype(dtype), clean[:, None].astype(dtype)


def train(weights: ModelWeights, pairs: Sequence[tuple[Image2D, Image2D]],
          cfg: TrainConfig,
          val_pairs: Sequence[tuple[Image2D, Image2D]] | None = None) -> TrainResult:
    """Optimize the model on (noisy, clean) pairs; returns weights + trace.

    Per epoch: seeded shuffle, forward on the unclamped network, mean-L1
    loss against the clean target (cropped to the original extent),
    backward, Adam step at the cosine-schedule rate. Validation metrics,
    when a val set is given, use inference-clamped outputs.
    """
    if not pairs:
        raise UsageError("train: empty pair list")
    h, w = pairs[0][0].height, pairs[0][0].width
    for i, (noisy, clean) in enumerate(pairs):
        if (noisy.height, noisy.width) != (h, w) or (clean.height, clean.width) != (h, w):
            raise DimensionError(f"train: pair {i} dims differ from first pair ({h}, {w})")
        if noisy.range_tag != "normalized01" or clean.range_tag != "normalized01":
            raise UsageError(f"train: pair {i} is not normalized01")

    plan = plan_scales(h, w, weights.config.divisors)
    dtype = next(iter(weights.tensors.values())).dtype
    noisy_all, clean_all = _stack_pairs(pairs, plan, dtype)
    params = weights.parameters()
    state = AdamState.for_params(params)
    schedule = CosineSchedule(cfg.eta0, cfg.eta_min, cfg.epochs)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n = len(pairs)
    trace: list[TraceRow] = []

    for epoch in range(cfg.epochs):
        lr = lr_at(schedule, epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = Tensor(noisy_all[idx])
            target = Tensor(clean_all[idx][:, :, :h, :w])
            pred = ad.crop2d(forward_full(weights, x, plan), h, w)
            loss = l1_loss(pred, target)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedError(epoch=epoch, loss=value)
            for p in params:
                p.grad = None
            loss.backward()
            adam_step(params, [p.grad for p in params], state, lr)
            losses.append((value, len(idx)))
        total = sum(c for _, c in losses)
        train_loss = sum(v * c for v, c in losses) / total
        val_psnr = val_ssim = math.nan
        if val_pairs:
            psnrs, ssims = [], []
            for noisy, clean in val_pairs:
                out = denoise_image(weights, noisy)
                psnrs.append(psnr(out, clean))
                ssims.append(ssim(out, clean))
            val_psnr, _ = aggregate(psnrs)
            val_ssim, _ = aggregate(ssims)
        trace.append(TraceRow(epoch=epoch, lr=lr, train_loss=float(train_loss),
                              val_psnr=val_psnr, val_ssim=val_ssim))
    return TrainResult(weights=weights, trace=trace)


TRACE_COLUMNS = ("epoch", "lr", "train_loss", "val_psnr", "val_ssim")


def write_trace_csv(trace: Sequence[TraceRow], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([row.epoch, repr(row.lr), repr(row.train_loss),
                             repr(row.val_psnr), repr(row.val_ssim)])


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: 8-byte magic, u32 length + canonical-JSON config, u32 tensor
# count, then per tensor (sorted by name): u16 name length, name bytes,
# u8 ndim, u32 dims, float32 little-endian data. A CRC32 of everything
# after the magic closes the file. All integers little-endian.

CHECKPOINT_MAGIC = b"PDNZCKP1"


def _config_to_json(config: ModelConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))


def _config_from_dict(d: dict) -> ModelConfig:
    scale_keys = {"divisor", "initial_kernel", "depth", "latent_channels",
                  "downsample_layer_index"}
    model_keys = {"scales", "fusion_channels", "consolidator_channels",
                  "fusion_mode", "seed"}
    if set(d) != model_keys:
        raise ConfigError(
            f"model config keys must be {sorted(model_keys)}, got {sorted(d)}"
        )
    scales = []
    for s in d["scales"]:
        if set(s) != scale_keys:
            raise ConfigError(
                f"scale config keys must be {sorted(scale_keys)}, got {sorted(s)}"
            )
        scales.append(ScaleConfig(**s))
    return ModelConfig(scales=tuple(scales), fusion_channels=d["fusion_channels"],
                       consolidator_channels=d["consolidator_channels"],
                       fusion_mode=d["fusion_mode"], seed=d["seed"])


def save_checkpoint(weights: ModelWeights, path: Path | str) -> None:
    """Write weights + config; byte-identical for identical weights."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = bytearray()
    config_json = _config_to_json(weights.config).encode()
    body += struct.pack("<I", len(config_json))
    body += config_json
    names = sorted(weights.tensors)
    body += struct.pack("<I", len(names))
    for name in names:
        tensor = weights.tensors[name]
        encoded = name.encode()
        body += struct.pack("<H", len(encoded))
        body += encoded
        body += struct.pack("<B", tensor.data.ndim)
        for dim in tensor.data.shape:
            body += struct.pack("<I", dim)
        body += tensor.data.astype("<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(CHECKPOINT_MAGIC + bytes(body))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, offset: int = 0):
        self.blob = blob
        self.offset = offset

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise IntegrityError(
                f"checkpoint truncated at offset {self.offset}: "
                f"needed {n} bytes for {what}, {len(self.blob) - self.offset} left"
            )
        piece = self.blob[self.offset:self.offset + n]
        self.offset += n
        return piece

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: Path | str,
                    expect_config: ModelConfig | None = None) -> ModelWeights:
    """Read a checkpoint back; truncation or corruption raises IntegrityError.

    Pass ``expect_config`` when resuming to fail fast on architecture
    mismatch (ConfigError).
    """
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise IntegrityError(f"checkpoint {path}: bad magic at offset 0")
    body_start = r.offset
    config_len = r.u32("config length")
    config_json = r.take(config_len, "config JSON")
    n_tensors = r.u32("tensor count")
    tensors: dict[str, Tensor] = {}
    for _ in range(n_tensors):
        name_len = struct.unpack("<H", r.take(2, "name length"))[0]
        name = r.take(name_len, "tensor name").decode()
        ndim = struct.unpack("<B", r.take(1, "ndim"))[0]
        shape = tuple(r.u32(f"dim of {name}") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count, f"data of {name}"), dtype="<f4")
        if name in tensors:
            raise IntegrityError(f"checkpoint {path}: duplicate tensor {name!r}")
        tensors[name] = Tensor(data.reshape(shape).astype(np.float32),
                               requires_grad=True)
    stored_crc = r.u32("checksum")
    if r.offset != len(blob):
        raise IntegrityError(
            f"checkpoint {path}: {len(blob) - r.offset} trailing bytes at offset {r.offset}"
        )
    actual_crc = zlib.crc32(blob[body_start:-4])
    if stored_crc != actual_crc:
        raise IntegrityError(
            f"checkpoint {path}: checksum mismatch "
            f"(stored {stored_crc:#x}, computed {actual_crc:#x})"
        )
    try:
        config_dict = json.loads(config_json.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"checkpoint {path}: unreadable config: {exc}") from exc
    config = _config_from_dict(config_dict)
    if expect_config is not None and config != expect_config:
        raise ConfigError(
            f"checkpoint {path}: stored config does not match the expected one"
        )
    loaded = ModelWeights(tensors=tensors, config=config)
    reference = build_model(config)
    if set(reference.tensors) != set(tensors):
        raise IntegrityError(f"checkpoint {path}: tensor names do not match the config")
    for name, ref in reference.tensors.items():
        if tensors[name].data.shape != ref.data.shape:
            raise IntegrityError(
                f"checkpoint {path}: tensor {name!r} has shape "
                f"{tensors[name].data.shape}, config implies {ref.data.shape}"
            )
    return loaded
