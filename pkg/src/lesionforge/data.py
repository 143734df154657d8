"""Datasets, preprocessing, class balancing, splits and the synthetic lesion generator."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import CLASS_NAMES
from .errors import ContractError, DataIOError, FormatError, SchemaError, SplitError
from .tensor import load_tensor, save_tensor

log = logging.getLogger(__name__)

PROVENANCES = ("loaded", "balanced", "reconstructed", "synthetic")


@dataclass(frozen=True)
class Sample:
    id: str
    image: np.ndarray  # [C, H, W]
    label: int

    def checksum(self) -> str:
        h = hashlib.sha256(self.id.encode())
        h.update(str(self.label).encode())
        h.update(np.ascontiguousarray(self.image, dtype=np.float32).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def apply(self, image: np.ndarray) -> np.ndarray:
        mu = np.asarray(self.mean, dtype=np.float32)[:, None, None]
        sd = np.asarray(self.std, dtype=np.float32)[:, None, None]
        return ((image - mu) / sd).astype(np.float32)


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    class_names: tuple[str, ...] = CLASS_NAMES
    provenance: str = "loaded"
    norm_stats: NormStats | None = None

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")
        k = len(self.class_names)
        for s in self.samples:
            if not 0 <= s.label < k:
                raise SchemaError(f"sample {s.id}: label {s.label} outside [0, {k})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def images(self) -> np.ndarray:
        """Stacked images [N, C, H, W] as float32."""
        return np.stack([s.image for s in self.samples]).astype(np.float32, copy=False)

    def histogram(self) -> dict[str, int]:
        counts = Counter(s.label for s in self.samples)
        return {self.class_names[k]: counts[k] for k in sorted(counts)}

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names)) if self.samples else \
            np.zeros(len(self.class_names), dtype=np.int64)

    def digest(self) -> str:
        h = hashlib.sha256(",".join(self.class_names).encode())
        for s in self.samples:
            h.update(s.checksum().encode())
        return h.hexdigest()

    def with_images(self, images: np.ndarray, provenance: str | None = None, norm_stats=None) -> "Dataset":
        if len(images) != len(self.samples):
            raise ContractError("image count does not match sample count")
        samples = tuple(replace(s, image=np.asarray(img, dtype=np.float32)) for s, img in zip(self.samples, images))
        return Dataset(samples, self.class_names, provenance or self.provenance, norm_stats)


@dataclass(frozen=True)
class AugmentSpec:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotation_deg: float = 20.0
    translate_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for p in (self.hflip_p, self.vflip_p):
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"flip probability {p} outside [0, 1]")
        if self.rotation_deg < 0 or not 0 <= self.translate_frac < 1:
            raise ContractError("rotation_deg must be >= 0 and translate_frac in [0, 1)")


# ----------------------------------------------------------------- loading

def parse_label(text: str, class_names: Sequence[str] = CLASS_NAMES) -> int:
    text = text.strip()
    if text in class_names:
        return class_names.index(text)
    if text.lstrip("-").isdigit():
        k = int(text)
        if 0 <= k < len(class_names):
            return k
    raise SchemaError(f"unknown label {text!r}; expected one of {list(class_names)} or an index")


def load_dataset(manifest_path: str | Path, data_root: str | Path | None = None,
                 class_names: Sequence[str] = CLASS_NAMES) -> Dataset:
    """Read a ``id,file,label`` manifest whose files are ``LTD1`` [C, H, W] images."""
    manifest_path = Path(manifest_path)
    root = Path(data_root) if data_root is not None else manifest_path.parent
    samples = []
    shape = None
    with manifest_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["id", "file", "label"]:
            raise SchemaError(f"{manifest_path}: header must be id,file,label")
        for row in reader:
            sid = row["id"].strip()
            label = parse_label(row["label"], class_names)
            path = root / row["file"].strip()
            if not path.is_file():
                raise DataIOError(f"sample {sid}: file {path} not found")
            image = load_tensor(path).data
            if image.ndim != 3:
                raise FormatError(f"sample {sid}: expected a [C, H, W] image, got shape {image.shape}")
            if shape is None:
                shape = image.shape
            elif image.shape != shape:
                raise FormatError(f"sample {sid}: shape {image.shape} differs from {shape}")
            samples.append(Sample(sid, image.astype(np.float32), label))
    return Dataset(tuple(samples), tuple(class_names), "loaded")


RASTER_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def load_image_file(path: str | Path) -> np.ndarray:
    """[C, H, W] float32 in [0, 1] from an ``LTD1`` file or an 8-bit RGB raster (divided by 255)."""
    path = Path(path)
    if path.suffix.lower() not in RASTER_SUFFIXES:
        return load_tensor(path).data.astype(np.float32)
    from PIL import Image

    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise DataIOError(f"cannot decode raster image {path}: {exc}") from exc
    return (rgb / 255.0).transpose(2, 0, 1).copy()


def prep_dataset(manifest_path: str | Path, data_root: str | Path | None, size: tuple[int, int],
                 class_names: Sequence[str] = CLASS_NAMES) -> Dataset:
    """Load a manifest of raster or ``LTD1`` images and resize every image to ``size``."""
    manifest_path = Path(manifest_path)
    root = Path(data_root) if data_root is not None else manifest_path.parent
    samples = []
    with manifest_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["id", "file", "label"]:
            raise SchemaError(f"{manifest_path}: header must be id,file,label")
        for row in reader:
            sid = row["id"].strip()
            label = parse_label(row["label"], class_names)
            path = root / row["file"].strip()
            if not path.is_file():
                raise DataIOError(f"sample {sid}: file {path} not found")
            image = load_image_file(path)
            if image.ndim != 3:
                raise FormatError(f"sample {sid}: expected a [C, H, W] image, got shape {image.shape}")
            samples.append(Sample(sid, resize_bilinear(image, size), label))
    return Dataset(tuple(samples), tuple(class_names), "loaded")


def save_dataset(dataset: Dataset, out_dir: str | Path, manifest_name: str = "manifest.csv") -> Path:
    """Write every image as ``images/<id>.ltd`` plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "file", "label"])
        for s in dataset.samples:
            rel = f"images/{_safe_name(s.id)}.ltd"
            save_tensor(out_dir / rel, s.image.astype(np.float32))
            writer.writerow([s.id, rel, dataset.class_names[s.label]])
    return manifest


def _safe_name(sample_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in sample_id)


# ----------------------------------------------------------------- resize / normalize

def resize_bilinear(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a [C, H, W] image using half-pixel centers (align_corners=False)."""
    th, tw = target
    if th < 1 or tw < 1:
        raise ContractError(f"resize target must be positive, got {target}")
    image = np.asarray(image)
    c, h, w = image.shape
    if (h, w) == (th, tw):
        return image.copy()

    def axis_weights(src, dst):
        pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
        pos = np.clip(pos, 0, src - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, (pos - lo).astype(image.dtype)

    y0, y1, fy = axis_weights(h, th)
    x0, x1, fx = axis_weights(w, tw)
    rows0, rows1 = image[:, y0, :], image[:, y1, :]
    # v0 + f * (v1 - v0) keeps constant regions exactly constant
    rows = rows0 + fy[None, :, None] * (rows1 - rows0)
    left, right = rows[:, :, x0], rows[:, :, x1]
    out = left + fx[None, None, :] * (right - left)
    return np.clip(out, image.min(), image.max()).astype(image.dtype)


def resize_dataset(dataset: Dataset, target: tuple[int, int]) -> Dataset:
    return dataset.with_images([resize_bilinear(s.image, target) for s in dataset.samples])


def compute_norm_stats(dataset: Dataset) -> NormStats:
    if not dataset.samples:
        raise ContractError("cannot compute normalization statistics of an empty dataset")
    x = dataset.images().astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    guarded = np.maximum(std, 1e-6)
    if np.any(std < 1e-6):
        log.warning("channel(s) %s have zero std; using 1e-6", np.flatnonzero(std < 1e-6).tolist())
    return NormStats(tuple(float(m) for m in mean), tuple(float(s) for s in guarded))


def normalize(dataset: Dataset, stats: NormStats | None = None) -> Dataset:
    """Per-channel standardization ``(x - mean_c) / std_c`` (population std).

    Without ``stats`` the statistics come from ``dataset`` itself (use this on the
    training split); pass the training split's ``norm_stats`` for val/test.
    """
    if not dataset.samples:
        raise ContractError("cannot normalize an empty dataset")
    stats = stats or compute_norm_stats(dataset)
    return dataset.with_images([stats.apply(s.image) for s in dataset.samples], norm_stats=stats)


# ----------------------------------------------------------------- augmentation / balancing

def augment_image(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Random flips, then one rotation+translation warp (bilinear, edge-replicated)."""
    out = np.asarray(image, dtype=np.float32)
    if rng.random() < spec.hflip_p:
        out = out[:, :, ::-1]
    if rng.random() < spec.vflip_p:
        out = out[:, ::-1, :]
    angle = np.deg2rad(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    _, h, w = out.shape
    shift = rng.uniform(-spec.translate_frac, spec.translate_frac, size=2) * np.array([h, w])
    if angle == 0 and not shift.any():
        return np.ascontiguousarray(out)
    cos, sin = np.cos(angle), np.sin(angle)
    rot = np.array([[cos, -sin], [sin, cos]])
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - rot @ (center + shift)
    warped = np.stack([ndimage.affine_transform(ch, rot, offset=offset, order=1, mode="nearest")
                       for ch in out])
    return warped.astype(np.float32)


def balance_by_oversampling(dataset: Dataset, spec: AugmentSpec) -> Dataset:
    """Top every class up to the largest class count with augmented copies.

    Copies cycle round-robin through each class's originals; copy ``j`` of class
    ``k`` draws its transform from its own seeded stream ``(seed, k, j)``.
    Originals come first, unmodified, followed by the new copies class by class.
    """
    counts = dataset.class_counts()
    if np.any(counts == 0):
        empty = [dataset.class_names[k] for k in np.flatnonzero(counts == 0)]
        raise ContractError(f"cannot balance: classes {empty} have no samples")
    target = int(counts.max())
    extra = []
    for k in range(len(dataset.class_names)):
        originals = [s for s in dataset.samples if s.label == k]
        for j in range(target - len(originals)):
            src = originals[j % len(originals)]
            rng = np.random.default_rng([spec.seed, k, j])
            extra.append(Sample(f"{src.id}#aug{j}", augment_image(src.image, spec, rng), k))
    if not extra:
        return dataset
    return Dataset(dataset.samples + tuple(extra), dataset.class_names, "balanced", dataset.norm_stats)


# ----------------------------------------------------------------- splits

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Per class, ``round(test_fraction * count)`` samples go to test (seeded choice).

    Both halves keep the original sample order.
    """
    if not 0 < test_fraction < 1:
        raise ContractError(f"test_fraction must be in (0, 1), got {test_fraction}")
    labels = dataset.labels
    in_test = np.zeros(len(dataset), dtype=bool)
    for k in range(len(dataset.class_names)):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise SplitError(f"class {dataset.class_names[k]} has {idx.size} sample; both splits need it")
        rng = np.random.default_rng([seed, k])
        chosen = rng.permutation(idx)[: _round_half_up(test_fraction * idx.size)]
        in_test[chosen] = True
    train = tuple(s for s, t in zip(dataset.samples, in_test) if not t)
    test = tuple(s for s, t in zip(dataset.samples, in_test) if t)
    return (Dataset(train, dataset.class_names, dataset.provenance, dataset.norm_stats),
            Dataset(test, dataset.class_names, dataset.provenance, dataset.norm_stats))


# ----------------------------------------------------------------- synthetic data

# one (hue, motif) per class, in class-index order
SYNTH_CLASSES = (
    ((0.85, 0.25, 0.20), "disc"),
    ((0.20, 0.55, 0.85), "ring"),
    ((0.35, 0.75, 0.25), "stripes"),
    ((0.80, 0.70, 0.15), "checker"),
    ((0.55, 0.25, 0.70), "gradient"),
    ((0.15, 0.15, 0.15), "speckle"),
    ((0.20, 0.75, 0.75), "cross"),
)
SKIN = np.array([0.93, 0.80, 0.70])


def _motif(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h / 2 + rng.uniform(-0.1, 0.1) * h
    cx = w / 2 + rng.uniform(-0.1, 0.1) * w
    r = np.hypot(yy - cy, xx - cx)
    size = min(h, w)
    if kind == "disc":
        return (r < size * rng.uniform(0.25, 0.35)).astype(float)
    if kind == "ring":
        rad = size * rng.uniform(0.28, 0.36)
        return (np.abs(r - rad) < size * 0.07).astype(float)
    if kind == "stripes":
        period = size * rng.uniform(0.22, 0.28)
        return (np.mod(yy + rng.uniform(0, period), period) < period / 2).astype(float)
    if kind == "checker":
        cell = max(2, int(round(size * rng.uniform(0.16, 0.22))))
        oy, ox = rng.integers(0, cell, size=2)
        return (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(float)
    if kind == "gradient":
        return np.clip((xx + rng.uniform(-0.1, 0.1) * w) / (w - 1), 0, 1)
    if kind == "speckle":
        # dense pigment with sparse skin-coloured gaps
        return (rng.random((h, w)) >= rng.uniform(0.10, 0.20)).astype(float)
    if kind == "cross":
        t = size * 0.09
        return ((np.abs(yy - cy) < t) | (np.abs(xx - cx) < t)).astype(float)
    raise ValueError(kind)


def synth_generate(n_per_class: int, size: tuple[int, int] = (32, 32), seed: int = 0) -> Dataset:
    """Seven procedurally drawn classes: class hue painted through a class motif on a
    skin-tone background, plus Gaussian noise (sigma 0.05), clipped to [0, 1]."""
    h, w = size
    if n_per_class < 1 or h < 8 or w < 8:
        raise ContractError("need n_per_class >= 1 and size >= 8x8")
    samples = []
    for k, (hue, motif) in enumerate(SYNTH_CLASSES):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, k, i])
            mask = _motif(motif, h, w, rng)[None]
            color = np.clip(np.asarray(hue) + rng.normal(0, 0.03, 3), 0, 1)[:, None, None]
            bg = np.clip(SKIN + rng.normal(0, 0.03, 3), 0, 1)[:, None, None]
            img = bg * (1 - mask) + color * mask + rng.normal(0, 0.05, (3, h, w))
            samples.append(Sample(f"syn_{CLASS_NAMES[k]}_{i:04d}", np.clip(img, 0, 1).astype(np.float32), k))
    return Dataset(tuple(samples), CLASS_NAMES, "synthetic")


def nearest_neighbor_accuracy(train: Dataset, test: Dataset) -> float:
    """1-NN on raw pixels (squared Euclidean distance); a separability oracle."""
    a = train.images().reshape(len(train), -1).astype(np.float64)
    b = test.images().reshape(len(test), -1).astype(np.float64)
    d = (b * b).sum(1)[:, None] - 2 * b @ a.T + (a * a).sum(1)[None, :]
    pred = train.labels[d.argmin(axis=1)]
    return float((pred == test.labels).mean())
