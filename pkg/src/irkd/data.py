"""Dataset manifests, the magnification ladder, sampling and augmentation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import tensor as T
from .tensor import ShapeError, Tensor

SPLITS = ("train", "val", "test")
MAGNIFICATIONS = (1, 2, 4, 8)
# factor -> nominal microscope magnification label
MAGNIFICATION_LABELS = {1: "10x", 2: "5x", 4: "2.5x", 8: "1.25x"}


class ManifestError(ValueError):
    pass


def check_factor(factor: int) -> int:
    factor = int(factor)
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"magnification factor must be a power of two, got {factor}")
    return factor


# -- resolution ladder ------------------------------------------------------------


def degrade(image, factor: int) -> np.ndarray:
    """Halve the resolution log2(factor) times, then restore to the input size.

    Accepts C×S×S or N×C×S×S arrays; factor 1 returns an exact copy.
    """
    factor = check_factor(factor)
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim not in (3, 4):
        raise ShapeError(f"degrade expects C×S×S or N×C×S×S, got {arr.shape}")
    h, w = arr.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"image size {(h, w)} not divisible by factor {factor}")
    if factor == 1:
        return arr.copy()
    x = Tensor(arr)
    for _ in range(int(math.log2(factor))):
        x = T.bilinear_resize(x, x.shape[-2] // 2, x.shape[-1] // 2)
    return T.bilinear_resize(x, h, w).data


# -- sampling -------------------------------------------------------------------


def balanced_indices(labels, epoch_len: int, seed: int, num_classes: int | None = None) -> np.ndarray:
    """Indices drawn with replacement so that every class is picked with probability 1/K."""
    labels = np.asarray(labels, dtype=int)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    members = [np.flatnonzero(labels == c) for c in range(k)]
    for c, m in enumerate(members):
        if m.size == 0:
            raise ValueError(f"class {c} has no training samples")
    rng = np.random.default_rng(seed)
    classes = rng.integers(0, k, size=epoch_len)
    picks = rng.random(epoch_len)
    out = np.empty(epoch_len, dtype=np.int64)
    for c, m in enumerate(members):
        sel = classes == c
        out[sel] = m[(picks[sel] * m.size).astype(np.int64)]
    return out


def sample_seed(run_seed: int, epoch: int, index: int, stream: int = 0) -> int:
    """Per-sample seed; independent of worker layout. ``stream`` separates uses."""
    return int(np.random.SeedSequence([stream, run_seed, epoch, index]).generate_state(1)[0])


# -- augmentation ---------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    probability: float = 0.5
    max_rotation: float = 45.0
    jitter: float = 0.1
    max_translate: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)


def augment(image: np.ndarray, seed: int, params: AugmentParams = AugmentParams()) -> np.ndarray:
    """Random rotation, brightness/contrast jitter and affine transform, each with
    probability ``params.probability``; output clamped to [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeError(f"augment expects a 1- or 3-channel C×H×W image, got {image.shape}")
    rng = np.random.default_rng(seed)
    # Draw everything up front so each branch's parameters do not depend on the others.
    coins = rng.random(3) < params.probability
    angle = rng.uniform(-params.max_rotation, params.max_rotation)
    brightness, contrast = rng.uniform(1 - params.jitter, 1 + params.jitter, size=2)
    shift = rng.uniform(-params.max_translate, params.max_translate, size=2) * np.array(image.shape[1:])
    scale = rng.uniform(*params.scale_range)
    if not coins.any():
        return image.copy()
    out = image.astype(np.float64)
    if coins[0]:
        out = ndimage.rotate(out, angle, axes=(1, 2), reshape=False, order=1, mode="reflect")
    if coins[1]:
        mean = out.mean(axis=(1, 2), keepdims=True)
        out = ((out - mean) * contrast + mean) * brightness
    if coins[2]:
        center = (np.array(out.shape[1:]) - 1) / 2.0
        # output pixel o samples input at center + (o - center - shift) / scale
        matrix = np.diag([1.0, 1.0 / scale, 1.0 / scale])
        offset = np.concatenate([[0.0], center - (center + shift) / scale])
        out = ndimage.affine_transform(out, matrix, offset=offset, order=1, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


# -- manifests --------------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    image: str
    label: int
    split: str
    group: str


@dataclass
class DatasetManifest:
    records: list[Record]
    class_names: list[str]
    base_size: int | None = None
    root: Path = field(default_factory=Path)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def validate(self) -> None:
        k = self.num_classes
        owner: dict[str, str] = {}
        for r in self.records:
            if r.split not in SPLITS:
                raise ManifestError(f"unknown split {r.split!r} for {r.image}")
            if not 0 <= r.label < k:
                raise ManifestError(f"label {r.label} out of range [0, {k}) for {r.image}")
            prev = owner.setdefault(r.group, r.split)
            if prev != r.split:
                raise ManifestError(f"group {r.group!r} appears in both {prev} and {r.split} splits")

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def path(self, record: Record) -> Path:
        p = Path(record.image)
        return p if p.is_absolute() else self.root / p

    def load_image(self, record: Record) -> np.ndarray:
        with Image.open(self.path(record)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return arr.transpose(2, 0, 1).copy()

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """All images of a split as an N×3×S×S float32 array in [0, 1], plus labels."""
        if split not in self._cache:
            recs = self.split(split)
            if not recs:
                raise ManifestError(f"split {split!r} is empty")
            images = np.stack([self.load_image(r) for r in recs])
            labels = np.array([r.label for r in recs], dtype=np.int64)
            self._cache[split] = (images, labels)
        return self._cache[split]


def load_manifest(csv_path, class_names: list[str] | None = None, check_files: bool = True) -> DatasetManifest:
    """Read a CSV with header image,label,split,group. Class names come from the
    argument, else a sibling ``classes.json``, else from the largest label."""
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise FileNotFoundError(f"manifest not found: {csv_path}")
    records = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"image", "label", "split", "group"}:
            raise ManifestError(f"{csv_path}: header must contain image,label,split,group")
        for row in reader:
            try:
                label = int(row["label"])
            except ValueError:
                raise ManifestError(f"non-integer label {row['label']!r} for {row['image']}") from None
            records.append(Record(row["image"], label, row["split"].strip(), row["group"]))
    if class_names is None:
        sidecar = csv_path.with_name("classes.json")
        if sidecar.exists():
            class_names = json.loads(sidecar.read_text())
        else:
            class_names = [str(i) for i in range(max((r.label for r in records), default=-1) + 1)]
    manifest = DatasetManifest(records, list(class_names), root=csv_path.parent)
    manifest.validate()
    if check_files:
        for r in records:
            if not manifest.path(r).exists():
                raise FileNotFoundError(f"image listed in manifest is missing: {manifest.path(r)}")
        if records:
            with Image.open(manifest.path(records[0])) as im:
                manifest.base_size = im.size[0]
    return manifest


def write_manifest(manifest: DatasetManifest, csv_path) -> None:
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "label", "split", "group"])
        for r in manifest.records:
            writer.writerow([r.image, r.label, r.split, r.group])
    csv_path.with_name("classes.json").write_text(json.dumps(manifest.class_names))


# -- synthetic data -------------------------------------------------------------

NOISE_SIGMA = 0.05
FG_AMPLITUDE = 0.25
BG_AMPLITUDE = 0.05
DISC_RADIUS = 0.3  # fraction of the image side
DISC_EDGE = 0.03


def class_frequencies(classes: int, size: int) -> np.ndarray:
    """Dominant radial frequency (cycles per image) of each class, coarse to fine."""
    lo, hi = size / 16.0, size * 0.375
    return lo * (hi / lo) ** (np.arange(classes) / (classes - 1))


def _grating(freq: float, xx: np.ndarray, yy: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sum of three randomly oriented cosines near ``freq``, unit variance."""
    tex = np.zeros_like(xx)
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        f = freq * rng.uniform(0.95, 1.05)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.cos(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return tex / 3 ** 0.5


def synth_texture(label: int, classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One single-channel image in [0, 1]: a soft-edged disc of the class texture at a
    random position over a faint texture of a random class."""
    freqs = class_frequencies(classes, size)
    yy, xx = np.mgrid[0:size, 0:size] / size
    fg = FG_AMPLITUDE * _grating(freqs[label], xx, yy, rng)
    cy, cx = rng.uniform(0.25, 0.75, 2)
    mask = 1.0 / (1.0 + np.exp((np.hypot(yy - cy, xx - cx) - DISC_RADIUS) / DISC_EDGE))
    bg = BG_AMPLITUDE * _grating(freqs[rng.integers(classes)], xx, yy, rng)
    img = 0.5 + mask * fg + (1 - mask) * bg + rng.normal(0, NOISE_SIGMA, (size, size))
    return np.clip(img, 0.0, 1.0)


def band_energy(image: np.ndarray, f_lo: float, f_hi: float) -> float:
    """Mean spectral power of a single-channel image within a radial frequency band."""
    img = np.asarray(image, dtype=np.float64)
    img = img - img.mean()
    power = np.abs(np.fft.fft2(img)) ** 2 / img.size
    fy = np.fft.fftfreq(img.shape[0]) * img.shape[0]
    fx = np.fft.fftfreq(img.shape[1]) * img.shape[1]
    radius = np.hypot(fy[:, None], fx[None, :])
    band = (radius >= f_lo) & (radius < f_hi)
    return float(power[band].mean())


def generate_synthetic(num_per_class: int, classes: int, size: int, seed: int, out_dir) -> DatasetManifest:
    """Write PNG textures plus manifest.csv / classes.json under ``out_dir``."""
    if size < 32:
        raise ValueError("synthetic images must be at least 32 pixels")
    if not 2 <= classes <= 8:
        raise ValueError("synthetic datasets support 2..8 classes")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train = int(round(0.70 * num_per_class))
    n_val = int(round(0.15 * num_per_class))
    records = []
    for label in range(classes):
        for j in range(num_per_class):
            split = "train" if j < n_train else "val" if j < n_train + n_val else "test"
            img = synth_texture(label, classes, size, rng)
            pixels = np.round(img * 255).astype(np.uint8)
            name = f"images/c{label}_{j:05d}.png"
            Image.fromarray(np.repeat(pixels[:, :, None], 3, axis=2)).save(out_dir / name)
            # five patches per synthetic "patient"; patients never straddle splits
            records.append(Record(name, label, split, f"{split}-c{label}-p{j // 5:04d}"))
    manifest = DatasetManifest(records, [f"class{k}" for k in range(classes)], base_size=size, root=out_dir)
    manifest.validate()
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
