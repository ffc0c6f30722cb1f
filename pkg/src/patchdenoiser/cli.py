"""Command-line surface tying the pipeline together.

Commands: ``synth`` (write a synthetic paired dataset), ``train``
(patient-wise fold training), ``denoise`` (run a checkpoint or a classical
baseline on one slice), ``eval`` (metrics report over a dataset),
``ablate`` (the three-arm architecture comparison), and ``show-config``
(print the effective run configuration). Global flags ``--config PATH``,
``--seed N``, ``--out DIR`` sit before the command name.

Exit codes: 0 success, 2 usage/config error, 3 data integrity error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import FILTER_KINDS, FilterSpec, apply_filter
from .dataio import (PairedDataset, export_image, generate_synthetic_dataset,
                     read_slice, scan_dataset)
from .errors import (ConfigError, DenoiserError, DivergedError,
                     IntegrityError, UsageError)
from .metrics import (aggregate, energy_per_inference, format_metric, psnr,
                      rmse, ssim)
from .model import (ModelConfig, ModelWeights, ScaleConfig, build_model,
                    count_flops, count_params, denoise_image, toy_config)
from .preprocess import (ABDOMEN_WINDOW, HuWindow, Image2D, denormalize,
                         to_hounsfield, window_normalize)
from .training import (TrainConfig, load_checkpoint, save_checkpoint,
                       split_folds, train, write_trace_csv)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INTEGRITY = 3
EXIT_DIVERGED = 4


# ---------------------------------------------------------------------------
# run configuration


@dataclasses.dataclass
class RunConfig:
    """Everything a run needs; mirrors the JSON config file structure."""

    dataset_root: str = "data/synth"
    output_dir: str = "runs/out"
    seed: int = 0
    hu_window: HuWindow = ABDOMEN_WINDOW
    model: ModelConfig = dataclasses.field(default_factory=toy_config)
    training: TrainConfig = dataclasses.field(default_factory=lambda: TrainConfig())
    folds: int = 5
    train_folds: tuple[int, ...] | None = None  # None means every fold

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train_folds"] = list(self.train_folds) if self.train_folds is not None else None
        return d


def _take_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _parse_model_section(section: dict) -> ModelConfig:
    allowed = {"scales", "fusion_channels", "consolidator_channels",
               "fusion_mode", "seed"}
    _take_keys(section, allowed, "model")
    base = toy_config()
    scales = base.scales
    if "scales" in section:
        parsed = []
        for i, s in enumerate(section["scales"]):
            _take_keys(s, {"divisor", "initial_kernel", "depth",
                           "latent_channels", "downsample_layer_index"},
                       f"model.scales[{i}]")
            parsed.append(ScaleConfig(**s))
        scales = tuple(parsed)
    return ModelConfig(
        scales=scales,
        fusion_channels=section.get("fusion_channels", base.fusion_channels),
        consolidator_channels=section.get("consolidator_channels",
                                          base.consolidator_channels),
        fusion_mode=section.get("fusion_mode", base.fusion_mode),
        seed=section.get("seed", base.seed),
    )


def load_run_config(path: Path | str | None) -> RunConfig:
    """Build the effective RunConfig from defaults plus an optional JSON file.

    Unknown keys anywhere in the file are rejected.
    """
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    allowed = {"dataset_root", "output_dir", "seed", "hu_window", "model",
               "training", "folds", "train_folds"}
    _take_keys(raw, allowed, "config")
    if "hu_window" in raw:
        _take_keys(raw["hu_window"], {"lo", "hi"}, "hu_window")
        cfg.hu_window = HuWindow(float(raw["hu_window"]["lo"]),
                                 float(raw["hu_window"]["hi"]))
    if "model" in raw:
        cfg.model = _parse_model_section(raw["model"])
    if "training" in raw:
        allowed_t = {"epochs", "batch_size", "eta0", "eta_min", "seed"}
        _take_keys(raw["training"], allowed_t, "training")
        base = TrainConfig()
        cfg.training = TrainConfig(
            epochs=raw["training"].get("epochs", base.epochs),
            batch_size=raw["training"].get("batch_size", base.batch_size),
            eta0=raw["training"].get("eta0", base.eta0),
            eta_min=raw["training"].get("eta_min", base.eta_min),
            seed=raw["training"].get("seed", base.seed),
            hu_window=cfg.hu_window,
        )
    cfg.dataset_root = raw.get("dataset_root", cfg.dataset_root)
    cfg.output_dir = raw.get("output_dir", cfg.output_dir)
    cfg.seed = int(raw.get("seed", cfg.seed))
    cfg.folds = int(raw.get("folds", cfg.folds))
    if raw.get("train_folds") is not None:
        cfg.train_folds = tuple(int(i) for i in raw["train_folds"])
    return cfg


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.model = dataclasses.replace(cfg.model, seed=args.seed)
        cfg.training = dataclasses.replace(cfg.training, seed=args.seed)
    if args.out is not None:
        cfg.output_dir = str(args.out)
    return cfg


# ---------------------------------------------------------------------------
# shared helpers


def _load_pair_images(pair, window: HuWindow) -> tuple[Image2D, Image2D]:
    low = window_normalize(to_hounsfield(read_slice(pair.low_path)), window)
    full = window_normalize(to_hounsfield(read_slice(pair.full_path)), window)
    return low, full


def _pairs_for_patients(ds: PairedDataset, patients: Sequence[str],
                        window: HuWindow):
    wanted = set(patients)
    return [_load_pair_images(p, window) for p in ds.pairs if p.patient_id in wanted]


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def _cmd_show_config(cfg: RunConfig, args) -> int:
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_synth(cfg: RunConfig, args) -> int:
    if args.size < 32:
        raise UsageError(f"synth: --size must be >= 32, got {args.size}")
    if args.patients < 1 or args.slices < 1:
        raise UsageError("synth: --patients and --slices must be >= 1")
    if args.photons <= 0:
        raise UsageError(f"synth: --photons must be > 0, got {args.photons}")
    root = Path(args.dataset or cfg.dataset_root)
    generate_synthetic_dataset(
        root, n_patients=args.patients, slices_per_patient=args.slices,
        dims=(args.size, args.size), photon_count=args.photons,
        seed=cfg.seed, window=cfg.hu_window, n_ellipses=args.ellipses,
    )
    ds = scan_dataset(root)
    print(f"wrote {len(ds.pairs)} low/full pairs "
          f"({args.patients} patients x {args.slices} slices, "
          f"{args.size}x{args.size}) under {root}")
    return EXIT_OK


def _train_one_fold(ds: PairedDataset, fold, cfg: RunConfig, out_dir: Path,
                    model_config: ModelConfig, train_config: TrainConfig):
    train_pairs = _pairs_for_patients(ds, fold.train_patients, cfg.hu_window)
    val_pairs = _pairs_for_patients(ds, fold.val_patients, cfg.hu_window)
    weights = build_model(model_config)
    result = train(weights, train_pairs, train_config, val_pairs=val_pairs)
    save_checkpoint(result.weights, out_dir / f"fold{fold.fold_index}.ckpt")
    write_trace_csv(result.trace, out_dir / f"fold{fold.fold_index}_trace.csv")
    psnrs, ssims, rmses = [], [], []
    for noisy, clean in val_pairs:
        out = denoise_image(result.weights, noisy)
        psnrs.append(psnr(out, clean))
        ssims.append(ssim(out, clean))
        rmses.append(rmse(out, clean))
    return {
        "fold": fold.fold_index,
        "val_patients": list(fold.val_patients),
        "psnr_mean": aggregate(psnrs)[0], "psnr_std": aggregate(psnrs)[1],
        "ssim_mean": aggregate(ssims)[0], "ssim_std": aggregate(ssims)[1],
        "rmse_mean": aggregate(rmses)[0], "rmse_std": aggregate(rmses)[1],
    }


def _write_fold_summary(rows: list[dict], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "psnr_mean", "psnr_std", "ssim_mean",
                         "ssim_std", "rmse_mean", "rmse_std"])
        for row in rows:
            writer.writerow([row["fold"], row["psnr_mean"], row["psnr_std"],
                             row["ssim_mean"], row["ssim_std"],
                             row["rmse_mean"], row["rmse_std"]])
        psnr_means = [r["psnr_mean"] for r in rows]
        ssim_means = [r["ssim_mean"] for r in rows]
        rmse_means = [r["rmse_mean"] for r in rows]
        writer.writerow(["mean+-std",
                         aggregate(psnr_means)[0], aggregate(psnr_means)[1],
                         aggregate(ssim_means)[0], aggregate(ssim_means)[1],
                         aggregate(rmse_means)[0], aggregate(rmse_means)[1]])
    _write_json(out_dir / "summary.json", {"folds": rows})


def _cmd_train(cfg: RunConfig, args) -> int:
    root = Path(args.dataset or cfg.dataset_root)
    out_dir = Path(cfg.output_dir)
    ds = scan_dataset(root)
    for warning in ds.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    k = args.folds if args.folds is not None else cfg.folds
    folds = split_folds(ds.patient_ids(), k=k, seed=cfg.seed)
    selection = cfg.train_folds
    if args.fold:
        selection = tuple(args.fold)
    if selection is not None:
        bad = [i for i in selection if not 0 <= i < k]
        if bad:
            raise UsageError(f"train: fold indices {bad} outside [0, {k})")
        folds = [f for f in folds if f.fold_index in set(selection)]
    train_config = dataclasses.replace(
        cfg.training,
        epochs=args.epochs if args.epochs is not None else cfg.training.epochs,
        hu_window=cfg.hu_window,
    )
    rows = []
    for fold in folds:
        row = _train_one_fold(ds, fold, cfg, out_dir, cfg.model, train_config)
        rows.append(row)
        print(f"fold {row['fold']}: PSNR {row['psnr_mean']:.3f} +- {row['psnr_std']:.3f}, "
              f"SSIM {row['ssim_mean']:.4f} +- {row['ssim_std']:.4f}")
    _write_fold_summary(rows, out_dir)
    print(f"artifacts under {out_dir}")
    return EXIT_OK


def _cmd_denoise(cfg: RunConfig, args) -> int:
    out_dir = Path(cfg.output_dir)
    rec = read_slice(Path(args.input))
    noisy = window_normalize(to_hounsfield(rec), cfg.hu_window)
    if args.baseline is not None:
        spec = FilterSpec(kind=args.baseline, window=args.filter_window,
                          sigma=args.filter_sigma)
        cleaned = apply_filter(noisy, spec)
        label = args.baseline
    else:
        if args.checkpoint is None:
            raise UsageError("denoise: need --checkpoint or --baseline")
        weights = load_checkpoint(args.checkpoint)
        cleaned = denoise_image(weights, noisy)
        label = "model"
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    png_path = out_dir / f"{stem}_{label}.png"
    export_image(cleaned, png_path, "png16")
    outputs = [str(png_path)]
    if args.hu_csv:
        csv_path = out_dir / f"{stem}_{label}_hu.csv"
        hu = denormalize(cleaned, cfg.hu_window)
        np.savetxt(csv_path, hu.values, fmt="%.17g", delimiter=",")
        outputs.append(str(csv_path))
    print("wrote " + ", ".join(outputs))
    return EXIT_OK


def _restore(img: Image2D, args, weights: ModelWeights | None) -> Image2D:
    if args.baseline == "identity":
        return img
    if args.baseline is not None:
        return apply_filter(img, FilterSpec(kind=args.baseline,
                                            window=args.filter_window,
                                            sigma=args.filter_sigma))
    assert weights is not None
    return denoise_image(weights, img)


def _cmd_eval(cfg: RunConfig, args) -> int:
    root = Path(args.dataset or cfg.dataset_root)
    out_dir = Path(cfg.output_dir)
    ds = scan_dataset(root)
    weights = None
    if args.baseline is None:
        if args.checkpoint is None:
            raise UsageError("eval: need --checkpoint or --baseline")
        weights = load_checkpoint(args.checkpoint)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_slice = []
    psnrs, ssims, rmses = [], [], []
    for i, pair in enumerate(ds.pairs):
        noisy, clean = _load_pair_images(pair, cfg.hu_window)
        restored = _restore(noisy, args, weights)
        p, s, r = psnr(restored, clean), ssim(restored, clean), rmse(restored, clean)
        psnrs.append(p)
        ssims.append(s)
        rmses.append(r)
        per_slice.append([pair.patient_id, pair.slice_index,
                          format_metric(p), format_metric(s), format_metric(r)])
        if i < args.images:
            stem = f"{pair.patient_id}_{pair.slice_index:04d}"
            export_image(restored, out_dir / f"{stem}_restored.png", "png16")
            diff = Image2D(np.clip(np.abs(restored.values - clean.values), 0.0, 1.0),
                           "normalized01")
            export_image(diff, out_dir / f"{stem}_absdiff.png", "png16")
    with open(out_dir / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "slice_index", "psnr", "ssim", "rmse"])
        writer.writerows(per_slice)
        writer.writerow(["mean", "", aggregate(psnrs)[0], aggregate(ssims)[0],
                         aggregate(rmses)[0]])
        writer.writerow(["std", "", aggregate(psnrs)[1], aggregate(ssims)[1],
                         aggregate(rmses)[1]])
    params = count_params(cfg.model) if weights is None else weights.parameter_count()
    h, w = ds.pairs[0].rows, ds.pairs[0].cols
    flop_config = cfg.model if weights is None else weights.config
    gflops = count_flops(flop_config, h, w)
    report = {
        "psnr_mean": format_metric(aggregate(psnrs)[0]),
        "psnr_std": format_metric(aggregate(psnrs)[1]),
        "ssim_mean": format_metric(aggregate(ssims)[0]),
        "ssim_std": format_metric(aggregate(ssims)[1]),
        "rmse_mean": format_metric(aggregate(rmses)[0]),
        "rmse_std": format_metric(aggregate(rmses)[1]),
        "params_m": params / 1e6,
        "gflops": gflops,
        "energy_per_inference": energy_per_inference(gflops),
        "n_slices": len(ds.pairs),
        "restorer": args.baseline or "model",
    }
    _write_json(out_dir / "eval.json", report)
    print(f"PSNR {report['psnr_mean']} +- {report['psnr_std']}, "
          f"SSIM {report['ssim_mean']} +- {report['ssim_std']}, "
          f"RMSE {report['rmse_mean']} +- {report['rmse_std']}")
    print(f"params {report['params_m']:.4f} M, {gflops:.3f} GFLOPs, "
          f"energy/inference {report['energy_per_inference']:.4f}")
    return EXIT_OK


ABLATION_ARMS = (
    # (arm name, divisor ladder, fusion mode)
    ("baseline-gated", (16, 8, 1), "gated"),
    ("small-patches", (32, 16, 2), "gated"),
    ("concat-fusion", (16, 8, 1), "concat"),
)


def _cmd_ablate(cfg: RunConfig, args) -> int:
    root = Path(args.dataset or cfg.dataset_root)
    out_dir = Path(cfg.output_dir)
    ds = scan_dataset(root)
    k = args.folds if args.folds is not None else min(cfg.folds, len(ds.patient_ids()))
    folds = split_folds(ds.patient_ids(), k=k, seed=cfg.seed)
    fold = folds[0]
    train_config = dataclasses.replace(
        cfg.training,
        epochs=args.epochs if args.epochs is not None else cfg.training.epochs,
        hu_window=cfg.hu_window,
    )
    train_pairs = _pairs_for_patients(ds, fold.train_patients, cfg.hu_window)
    val_pairs = _pairs_for_patients(ds, fold.val_patients, cfg.hu_window)
    rows = []
    for name, divisors, mode in ABLATION_ARMS:
        model_config = toy_config(seed=cfg.model.seed, fusion_mode=mode,
                                  divisors=divisors)
        weights = build_model(model_config)
        result = train(weights, train_pairs, train_config, val_pairs=val_pairs)
        psnrs, ssims = [], []
        for noisy, clean in val_pairs:
            out = denoise_image(result.weights, noisy)
            psnrs.append(psnr(out, clean))
            ssims.append(ssim(out, clean))
        rows.append({
            "arm": name,
            "divisors": list(divisors),
            "fusion_mode": mode,
            "params": count_params(model_config),
            "psnr_mean": aggregate(psnrs)[0],
            "psnr_std": aggregate(psnrs)[1],
            "ssim_mean": aggregate(ssims)[0],
            "ssim_std": aggregate(ssims)[1],
        })
        print(f"{name}: divisors {divisors}, fusion {mode}, "
              f"params {rows[-1]['params']}, PSNR {rows[-1]['psnr_mean']:.3f}, "
              f"SSIM {rows[-1]['ssim_mean']:.4f}")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "divisors", "fusion_mode", "params",
                         "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"])
        for row in rows:
            writer.writerow([row["arm"], "/".join(map(str, row["divisors"])),
                             row["fusion_mode"], row["params"],
                             row["psnr_mean"], row["psnr_std"],
                             row["ssim_mean"], row["ssim_std"]])
    _write_json(out_dir / "ablation.json", {"arms": rows})
    print(f"ablation report under {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchdenoiser",
        description="Multi-scale patch-based CT denoising pipeline.",
    )
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON run configuration file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override every seed in the run configuration")
    parser.add_argument("--out", type=Path, default=None,
                        help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("show-config", help="print the effective run configuration")

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--dataset", type=Path, default=None, help="dataset root to write")
    p.add_argument("--patients", type=int, default=4)
    p.add_argument("--slices", type=int, default=25)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--photons", type=float, default=1000.0)
    p.add_argument("--ellipses", type=int, default=5)

    p = sub.add_parser("train", help="train with patient-wise folds")
    p.add_argument("--dataset", type=Path, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--fold", type=int, action="append", default=None,
                   help="train only this fold index (repeatable)")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("denoise", help="denoise one stored slice")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--input", type=Path, required=True, help="slice .raw path")
    p.add_argument("--baseline", choices=FILTER_KINDS, default=None,
                   help="bypass the model and run a classical filter")
    p.add_argument("--filter-window", type=int, default=3)
    p.add_argument("--filter-sigma", type=float, default=1.0)
    p.add_argument("--hu-csv", action="store_true",
                   help="also write the result in HU space as csv")

    p = sub.add_parser("eval", help="metrics report over a dataset")
    p.add_argument("--dataset", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--baseline", choices=FILTER_KINDS + ("identity",),
                   default=None)
    p.add_argument("--filter-window", type=int, default=3)
    p.add_argument("--filter-sigma", type=float, default=1.0)
    p.add_argument("--images", type=int, default=4,
                   help="emit restored + |diff| PNGs for the first N slices")

    p = sub.add_parser("ablate", help="run the three-arm architecture comparison")
    p.add_argument("--dataset", type=Path, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    return parser


_COMMANDS = {
    "show-config": _cmd_show_config,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "denoise": _cmd_denoise,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _apply_overrides(load_run_config(args.config), args)
        return _COMMANDS[args.command](cfg, args)
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
