"""Dataset plumbing: the MCI1 image container, manifests, normalization,
and a synthetic multi-channel microscopy-style generator with known
localization ground truth.

MCI1 layout (little-endian): magic "MCI1", version u32, C u16, H u32,
W u32, dtype tag u8 (0 = u16, 1 = f32), planar channel data, CRC32 of the
pixel payload.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import (
    FormatError,
    canonical_json,
    check_crc,
    read_magic,
    read_u8,
    read_u16,
    read_u32,
    write_crc,
    write_magic,
    write_u8,
    write_u16,
    write_u32,
)

MCI_MAGIC = b"MCI1"
MCI_VERSION = 1

GRADE_AMPLITUDE = {1: 0.55, 2: 0.75, 3: 1.0}

PATTERN_FAMILIES = ("nucleoplasm", "membrane", "cytoplasm", "vesicles")


@dataclass
class MultiChannelImage:
    """C x H x W float intensities in [0, 1] plus the source bit depth."""

    data: np.ndarray
    bit_depth: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"expected (C, H, W), got shape {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class ManifestRecord:
    image_id: str
    path: str
    labels: dict[str, int]  # class name -> grade in {1, 2, 3}


@dataclass
class DatasetManifest:
    name: str
    channels: list[str]
    classes: list[str]
    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def image_path(self, record: ManifestRecord) -> Path:
        return self.root / record.path

    def to_json_obj(self) -> dict:
        return {
            "name": self.name,
            "channels": list(self.channels),
            "classes": list(self.classes),
            "records": [
                {"id": r.image_id, "path": r.path, "labels": r.labels} for r in self.records
            ],
        }


# ---------------------------------------------------------------------------
# MCI1 container


def write_image(path, array: np.ndarray):
    """Write a planar (C, H, W) u16 or f32 array losslessly."""
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {array.shape}")
    if array.dtype == np.uint16:
        tag, payload_dtype = 0, "<u2"
    elif array.dtype == np.float32:
        tag, payload_dtype = 1, "<f4"
    else:
        raise ValueError(f"unsupported dtype {array.dtype}; use uint16 or float32")
    c, h, w = array.shape
    payload = np.ascontiguousarray(array, dtype=payload_dtype).tobytes()
    with open(path, "wb") as f:
        write_magic(f, MCI_MAGIC, MCI_VERSION)
        write_u16(f, c)
        write_u32(f, h)
        write_u32(f, w)
        write_u8(f, tag)
        f.write(payload)
        write_crc(f, payload)


def read_image_raw(path) -> np.ndarray:
    """Read back the exact array written by write_image."""
    with open(path, "rb") as f:
        read_magic(f, MCI_MAGIC, MCI_VERSION)
        c = read_u16(f)
        h = read_u32(f)
        w = read_u32(f)
        tag = read_u8(f)
        if tag == 0:
            dtype, itemsize = "<u2", 2
        elif tag == 1:
            dtype, itemsize = "<f4", 4
        else:
            raise FormatError(f"unknown dtype tag {tag}")
        payload = f.read(c * h * w * itemsize)
        if len(payload) != c * h * w * itemsize:
            raise FormatError("truncated pixel payload")
        check_crc(f, payload)
    return np.frombuffer(payload, dtype=dtype).reshape(c, h, w).copy()


def read_image(path) -> MultiChannelImage:
    """Read and normalize: u16 sources go through percentile normalization,
    f32 sources are taken as already normalized."""
    return normalize_image(read_image_raw(path))


def normalize_image(raw: np.ndarray) -> MultiChannelImage:
    """Per-channel percentile normalization of u16 data to [0, 1].

    Each channel is clipped to its [p1, p99.9] range and rescaled; a
    constant channel maps to zero. Already-normalized f32 input passes
    through unchanged, making the operation idempotent.
    """
    raw = np.asarray(raw)
    if raw.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {raw.shape}")
    if raw.dtype == np.float32:
        return MultiChannelImage(data=raw, bit_depth=32)
    if raw.dtype != np.uint16:
        raise ValueError(f"unsupported dtype {raw.dtype}")
    out = np.zeros(raw.shape, dtype=np.float32)
    for c in range(raw.shape[0]):
        channel = raw[c].astype(np.float32)
        lo, hi = np.percentile(channel, (1.0, 99.9))
        if hi <= lo:
            continue  # constant (or near-degenerate) channel -> zeros
        out[c] = (np.clip(channel, lo, hi) - lo) / (hi - lo)
    return MultiChannelImage(data=out, bit_depth=16)


# ---------------------------------------------------------------------------
# manifest io


def save_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    path.write_bytes(canonical_json(manifest.to_json_obj()) + b"\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        obj = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    for key in ("name", "channels", "classes", "records"):
        if key not in obj:
            raise FormatError(f"manifest missing key {key!r}")
    classes = list(obj["classes"])
    if len(set(classes)) != len(classes):
        raise FormatError("duplicate class names in manifest")
    records = []
    seen_ids = set()
    for rec in obj["records"]:
        image_id = rec["id"]
        if image_id in seen_ids:
            raise FormatError(f"duplicate image id {image_id!r}")
        seen_ids.add(image_id)
        for cls, grade in rec["labels"].items():
            if cls not in classes:
                raise FormatError(f"record {image_id!r} references unknown class {cls!r}")
            if grade not in (1, 2, 3):
                raise FormatError(f"record {image_id!r} has grade {grade!r} outside 1..3")
        records.append(ManifestRecord(image_id=image_id, path=rec["path"], labels=dict(rec["labels"])))
    manifest = DatasetManifest(
        name=obj["name"],
        channels=list(obj["channels"]),
        classes=classes,
        records=records,
        root=path.parent,
    )
    for rec in manifest.records:
        if not manifest.image_path(rec).exists():
            raise FormatError(f"missing image file: {manifest.image_path(rec)}")
    return manifest


def load_image(manifest: DatasetManifest, record: ManifestRecord) -> MultiChannelImage:
    img = read_image(manifest.image_path(record))
    if img.channels != len(manifest.channels):
        raise FormatError(
            f"{record.image_id}: image has {img.channels} channels, "
            f"manifest says {len(manifest.channels)}"
        )
    return img


def dataset_hash(manifest: DatasetManifest) -> str:
    """SHA-256 over the manifest content and every image file, in record order."""
    h = hashlib.sha256()
    h.update(canonical_json(manifest.to_json_obj()))
    for rec in manifest.records:
        h.update(manifest.image_path(rec).read_bytes())
    return h.hexdigest()


def labels_to_matrix(manifest: DatasetManifest, grade_threshold: int = 1) -> np.ndarray:
    """Binary multi-hot matrix (N, n_classes); positive iff grade >= threshold."""
    if grade_threshold not in (1, 2, 3):
        raise ValueError("grade_threshold must be 1, 2, or 3")
    index = {name: i for i, name in enumerate(manifest.classes)}
    out = np.zeros((len(manifest.records), len(manifest.classes)), dtype=np.float32)
    for row, rec in enumerate(manifest.records):
        for cls, grade in rec.labels.items():
            if grade >= grade_threshold:
                out[row, index[cls]] = 1.0
    return out


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthSpec:
    n_images: int
    height: int = 96
    width: int = 96
    classes: int = 4
    seed: int = 0
    multi_label_p: float = 0.25
    name: str = "synthetic"

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_images < 1:
            raise ValueError("need at least 1 image")
        if min(self.height, self.width) < 32:
            raise ValueError("images smaller than 32px are not supported")


def class_names(n: int) -> list[str]:
    names = []
    for i in range(n):
        family = PATTERN_FAMILIES[i % len(PATTERN_FAMILIES)]
        variant = i // len(PATTERN_FAMILIES)
        names.append(family if variant == 0 else f"{family}-v{variant + 1}")
    return names


def _draw_cells(rng: np.random.Generator, h: int, w: int):
    """2-3 well-separated cells: center, nucleus sigma, cell radius.

    Separation keeps one cell's boundary pattern away from another
    cell's nucleus, which the class-statistics contract relies on.
    """
    n_cells = int(rng.integers(2, 4))
    margin = 16.0
    min_sep = 32.0
    centers: list[tuple[float, float]] = []
    for _ in range(n_cells):
        for _ in range(64):
            cy = rng.uniform(margin, h - margin)
            cx = rng.uniform(margin, w - margin)
            if all((cy - oy) ** 2 + (cx - ox) ** 2 >= min_sep**2 for oy, ox in centers):
                centers.append((cy, cx))
                break
    cells = []
    for cy, cx in centers:
        sigma = rng.uniform(5.0, 7.0)
        cells.append((cy, cx, sigma, sigma * rng.uniform(2.2, 2.7)))
    return cells


def _protein_pattern(class_idx: int, cells, dist2, nucleus_norm, rng: np.random.Generator):
    """Spatial pattern for one localization class, in [0, 1]."""
    family = class_idx % len(PATTERN_FAMILIES)
    variant = class_idx // len(PATTERN_FAMILIES)
    out = np.zeros_like(nucleus_norm)
    if family == 0:  # nucleoplasm: protein fills the nucleus
        width = (0.7, 1.0, 1.3)[variant % 3]
        for i, (_, _, sigma, _) in enumerate(cells):
            out += np.exp(-dist2[i] / (2.0 * (width * sigma) ** 2))
    elif family == 1:  # membrane: ring at the cell boundary
        radius_f = (1.0, 0.78, 1.15)[variant % 3]
        for i, (_, _, _, r_cell) in enumerate(cells):
            d = np.sqrt(dist2[i])
            out += np.exp(-((d - radius_f * r_cell) ** 2) / (2.0 * 1.8**2))
    elif family == 2:  # cytoplasm: diffuse fill between nucleus and boundary
        soft = (3.0, 5.0, 2.0)[variant % 3]
        for i, (_, _, _, r_cell) in enumerate(cells):
            d = np.sqrt(dist2[i])
            inside = 1.0 / (1.0 + np.exp((d - r_cell) / soft))
            out += inside
        out = out * (1.0 - nucleus_norm)
    else:  # vesicles: punctate dots in the cytoplasm
        n_dots = (12, 18, 7)[variant % 3]
        dot_sigma = (1.5, 1.1, 2.1)[variant % 3]
        h, w = nucleus_norm.shape
        yy, xx = np.mgrid[0:h, 0:w]
        for i, (cy, cx, sigma, r_cell) in enumerate(cells):
            for _ in range(n_dots):
                ang = rng.uniform(0, 2 * np.pi)
                rad = rng.uniform(1.4 * sigma, 0.9 * r_cell)
                dy, dx = cy + rad * np.sin(ang), cx + rad * np.cos(ang)
                out += np.exp(-((yy - dy) ** 2 + (xx - dx) ** 2) / (2.0 * dot_sigma**2))
    peak = out.max()
    if peak > 0:
        out = out / peak
    return out


def synthesize_image(spec: SynthSpec, image_idx: int) -> tuple[np.ndarray, dict[str, int]]:
    """One (protein, nucleus) u16 image and its graded labels.

    The primary class cycles round-robin over the class list, which
    guarantees every class at least floor(n_images / classes) appearances.
    """
    rng = np.random.default_rng([spec.seed, image_idx])
    h, w = spec.height, spec.width
    cells = _draw_cells(rng, h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    dist2 = [
        (yy - cy) ** 2 + (xx - cx) ** 2 for cy, cx, _, _ in cells
    ]

    nucleus = np.zeros((h, w), dtype=np.float64)
    for i, (_, _, sigma, _) in enumerate(cells):
        nucleus += np.exp(-dist2[i] / (2.0 * sigma**2))
    nucleus_norm = nucleus / nucleus.max()

    names = class_names(spec.classes)
    primary = image_idx % spec.classes
    assigned = {primary: int(rng.integers(1, 4))}
    if rng.random() < spec.multi_label_p:
        secondary = int(rng.integers(0, spec.classes - 1))
        if secondary >= primary:
            secondary += 1
        assigned[secondary] = int(rng.integers(1, 4))

    protein = np.zeros((h, w), dtype=np.float64)
    for class_idx, grade in sorted(assigned.items()):
        pattern = _protein_pattern(class_idx, cells, dist2, nucleus_norm, rng)
        protein += GRADE_AMPLITUDE[grade] * pattern

    noise = rng.normal(0.0, 0.008, size=(2, h, w))
    stack = np.stack([protein, 0.9 * nucleus_norm]) + noise + 0.02
    stack = np.clip(stack, 0.0, 1.0)
    raw = np.round(stack * 65535.0).astype(np.uint16)
    labels = {names[i]: grade for i, grade in sorted(assigned.items())}
    return raw, labels


def generate_synthetic_dataset(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write images plus manifest.json under out_dir; deterministic per seed."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(spec.n_images):
        raw, labels = synthesize_image(spec, i)
        image_id = f"img{i:05d}"
        rel = f"images/{image_id}.mci"
        write_image(out_dir / rel, raw)
        records.append(ManifestRecord(image_id=image_id, path=rel, labels=labels))
    manifest = DatasetManifest(
        name=spec.name,
        channels=["protein", "nucleus"],
        classes=class_names(spec.classes),
        records=records,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
