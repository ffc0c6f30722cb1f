"""Bit-exact slice storage, paired dataset layout, and image export.

A stored slice is two files: ``<index>.raw`` with row-major 16-bit
little-endian signed pixels, and ``<index>.meta``, a JSON sidecar carrying
rows, cols, rescale_slope, rescale_intercept, patient_id, slice_index and
dose_tag. Datasets live under ``root/<patient_id>/<dose_tag>/`` with
dose_tag one of ``low`` or ``full``; low/full pairs match on
(patient_id, slice_index).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyDatasetError, FormatError, IntegrityError, UsageError
from .preprocess import (HuWindow, ABDOMEN_WINDOW, Image2D, SliceRecord,
                         add_poisson_noise, denormalize, generate_phantom)

DOSE_TAGS = ("low", "full")
SIDECAR_KEYS = ("rows", "cols", "rescale_slope", "rescale_intercept",
                "patient_id", "slice_index", "dose_tag")

# Inverse of the HU rescale applied when encoding synthetic slices; these
# mirror how CT pixel data commonly ships.
SYNTH_RESCALE_SLOPE = 1.0
SYNTH_RESCALE_INTERCEPT = -1024.0


@dataclass(frozen=True)
class SlicePair:
    """One matched low/full dose slice pair on disk."""

    patient_id: str
    slice_index: int
    low_path: Path
    full_path: Path
    rows: int
    cols: int


@dataclass
class PairedDataset:
    """Scan result: matched pairs plus warnings about excluded strays."""

    root: Path
    pairs: list[SlicePair]
    warnings: list[str]

    def patient_ids(self) -> list[str]:
        return sorted({p.patient_id for p in self.pairs})


def _meta_path(raw_path: Path) -> Path:
    return raw_path.with_suffix(".meta")


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_slice(rec: SliceRecord, path: Path | str, dose_tag: str) -> None:
    """Store a slice as raw int16 payload plus JSON sidecar, atomically."""
    if dose_tag not in DOSE_TAGS:
        raise UsageError(f"write_slice: dose_tag must be one of {DOSE_TAGS}, got {dose_tag!r}")
    path = Path(path)
    pixels = np.asarray(rec.pixels)
    if pixels.min() < np.iinfo(np.int16).min or pixels.max() > np.iinfo(np.int16).max:
        raise UsageError("write_slice: pixel values do not fit in int16")
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "rows": int(pixels.shape[0]),
        "cols": int(pixels.shape[1]),
        "rescale_slope": float(rec.rescale_slope),
        "rescale_intercept": float(rec.rescale_intercept),
        "patient_id": rec.patient_id,
        "slice_index": int(rec.slice_index),
        "dose_tag": dose_tag,
    }
    _atomic_write(path, pixels.astype("<i2").tobytes())
    _atomic_write(_meta_path(path), (json.dumps(meta, sort_keys=True) + "\n").encode())


def read_sidecar(path: Path | str) -> dict:
    """Parse and validate the JSON sidecar next to a .raw payload."""
    meta_path = _meta_path(Path(path))
    if not meta_path.exists():
        raise FormatError(f"missing sidecar {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable sidecar {meta_path}: {exc}") from exc
    if not isinstance(meta, dict) or set(meta) != set(SIDECAR_KEYS):
        raise FormatError(
            f"sidecar {meta_path} must contain exactly the keys {sorted(SIDECAR_KEYS)}"
        )
    if meta["dose_tag"] not in DOSE_TAGS:
        raise FormatError(f"sidecar {meta_path} has invalid dose_tag {meta['dose_tag']!r}")
    if meta["rows"] < 1 or meta["cols"] < 1:
        raise FormatError(f"sidecar {meta_path} has non-positive dims")
    return meta


def read_slice(path: Path | str) -> SliceRecord:
    """Load a stored slice; integer pixel values are preserved exactly."""
    path = Path(path)
    meta = read_sidecar(path)
    if not path.exists():
        raise FormatError(f"missing payload {path}")
    payload = path.read_bytes()
    expected = meta["rows"] * meta["cols"] * 2
    if len(payload) != expected:
        raise IntegrityError(
            f"payload {path}: expected {expected} bytes "
            f"({meta['rows']}x{meta['cols']} int16), found {len(payload)}"
        )
    pixels = np.frombuffer(payload, dtype="<i2").reshape(meta["rows"], meta["cols"])
    return SliceRecord(
        pixels=pixels.astype(np.int16),
        rescale_slope=meta["rescale_slope"],
        rescale_intercept=meta["rescale_intercept"],
        patient_id=meta["patient_id"],
        slice_index=meta["slice_index"],
    )


def scan_dataset(root: Path | str) -> PairedDataset:
    """Enumerate a dataset root into matched low/full pairs.

    Enumeration is lexicographic on normalized relative paths, so the pair
    order is deterministic and platform-independent. Unpaired slices are
    excluded with a warning; duplicate (patient, index, dose) entries are a
    format error; zero pairs is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"scan_dataset: {root} is not a directory")
    raw_paths = sorted(root.rglob("*.raw"), key=lambda p: p.relative_to(root).as_posix())
    by_key: dict[tuple[str, int], dict[str, tuple[Path, dict]]] = {}
    for path in raw_paths:
        meta = read_sidecar(path)
        key = (meta["patient_id"], meta["slice_index"])
        slot = by_key.setdefault(key, {})
        if meta["dose_tag"] in slot:
            raise FormatError(
                f"duplicate {meta['dose_tag']}-dose slice for patient "
                f"{key[0]!r} index {key[1]}: {path} and {slot[meta['dose_tag']][0]}"
            )
        slot[meta["dose_tag"]] = (path, meta)
    pairs: list[SlicePair] = []
    warnings: list[str] = []
    for key in sorted(by_key):
        slot = by_key[key]
        if len(slot) != 2:
            (dose, (path, _)) = next(iter(slot.items()))
            warnings.append(f"unpaired {dose}-dose slice excluded: {path}")
            continue
        low_path, low_meta = slot["low"]
        full_path, full_meta = slot["full"]
        if (low_meta["rows"], low_meta["cols"]) != (full_meta["rows"], full_meta["cols"]):
            raise FormatError(
                f"pair {key} has mismatched dims: low "
                f"{(low_meta['rows'], low_meta['cols'])} vs full "
                f"{(full_meta['rows'], full_meta['cols'])}"
            )
        pairs.append(SlicePair(
            patient_id=key[0], slice_index=key[1],
            low_path=low_path, full_path=full_path,
            rows=low_meta["rows"], cols=low_meta["cols"],
        ))
    if not pairs:
        raise EmptyDatasetError(f"no matched low/full pairs under {root}")
    return PairedDataset(root=root, pairs=pairs, warnings=warnings)


def encode_normalized(img: Image2D, window: HuWindow) -> np.ndarray:
    """Normalized image -> stored int16 pixels via HU and the synth rescale."""
    hu = denormalize(img, window)
    pixels = np.rint((hu.values - SYNTH_RESCALE_INTERCEPT) / SYNTH_RESCALE_SLOPE)
    return pixels.astype(np.int16)


def generate_synthetic_dataset(root: Path | str, n_patients: int,
                               slices_per_patient: int, dims: tuple[int, int] = (128, 128),
                               photon_count: float = 1000.0, seed: int = 0,
                               window: HuWindow = ABDOMEN_WINDOW,
                               n_ellipses: int = 5) -> None:
    """Write a paired phantom dataset: clean full-dose, Poisson-noised low-dose.

    Per-slice seeds derive from the master seed through a SeedSequence, so
    the same arguments always produce byte-identical files.
    """
    if n_patients < 1 or slices_per_patient < 1:
        raise UsageError("generate_synthetic_dataset: need >= 1 patient and slice")
    root = Path(root)
    seeds = np.random.SeedSequence(seed).generate_state(2 * n_patients * slices_per_patient)
    i = 0
    for p in range(n_patients):
        patient_id = f"P{p:02d}"
        for s in range(slices_per_patient):
            clean = generate_phantom(dims[0], dims[1], n_ellipses, int(seeds[i]))
            noisy = add_poisson_noise(clean, photon_count, int(seeds[i + 1]))
            i += 2
            for dose, img in (("full", clean), ("low", noisy)):
                rec = SliceRecord(
                    pixels=encode_normalized(img, window),
                    rescale_slope=SYNTH_RESCALE_SLOPE,
                    rescale_intercept=SYNTH_RESCALE_INTERCEPT,
                    patient_id=patient_id,
                    slice_index=s,
                )
                write_slice(rec, root / patient_id / dose / f"{s:04d}.raw", dose)


def export_image(img: Image2D, path: Path | str, fmt: str) -> None:
    """Write a normalized image as png8, png16, or full-precision csv."""
    if img.range_tag != "normalized01":
        raise UsageError(f"export_image: image must be normalized01, got {img.range_tag!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "png8":
        from PIL import Image
        arr = np.rint(img.values * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(path)
    elif fmt == "png16":
        from PIL import Image
        arr = np.rint(img.values * 65535.0).astype(np.uint16)
        Image.fromarray(arr, mode="I;16").save(path)
    elif fmt == "csv":
        np.savetxt(path, img.values, fmt="%.17g", delimiter=",")
    else:
        raise UsageError(f"export_image: unknown format {fmt!r}")


def import_image_csv(path: Path | str, range_tag: str = "normalized01") -> Image2D:
    """Read back a csv export."""
    values = np.loadtxt(Path(path), delimiter=",", dtype=np.float64, ndmin=2)
    return Image2D(values, range_tag)
