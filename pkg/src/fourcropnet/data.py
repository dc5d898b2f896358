"""Dataset discovery, 80/10/10 splitting, image decoding, augmentation and batching."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
MIN_CLASS_SIZE = 10
RATIOS = (0.8, 0.1, 0.1)


@dataclass
class ClassEntry:
    name: str
    crop: str
    disease: str
    directory: Path
    files: list[Path]


@dataclass
class DatasetIndex:
    root: Path
    classes: list[ClassEntry]

    @property
    def class_count(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]


@dataclass
class Split:
    train: list[tuple[Path, int]]
    valid: list[tuple[Path, int]]
    test: list[tuple[Path, int]]
    seed: int | None = None
    ratios: tuple = RATIOS

    def part(self, name: str) -> list[tuple[Path, int]]:
        if name not in ("train", "valid", "test"):
            raise ConfigError(f"unknown split part {name!r}")
        return getattr(self, name)


@dataclass
class AugmentConfig:
    rotation_degrees: float = 15.0
    horizontal_flip_prob: float = 0.5
    vertical_flip_prob: float = 0.5
    brightness_delta: float = 0.2

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


def _parse_class_name(name: str) -> tuple[str, str]:
    for sep in ("___", "__"):
        if sep in name:
            crop, disease = name.split(sep, 1)
            return crop, disease
    return name, ""


def scan_dataset(root) -> DatasetIndex:
    """Index ``root/<class>/<image>`` with classes sorted by directory name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist or is not a directory: {root}")
    classes = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in d.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DataError(f"class directory contains no images: {d}")
        if len(files) < MIN_CLASS_SIZE:
            raise DataError(f"class directory {d} has {len(files)} images; at least {MIN_CLASS_SIZE} are needed to split 80/10/10")
        crop, disease = _parse_class_name(d.name)
        classes.append(ClassEntry(d.name, crop, disease, d, files))
    if not classes:
        raise DataError(f"no class directories found under {root}")
    return DatasetIndex(root, classes)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(n: int) -> tuple[int, int, int]:
    """(train, valid, test) sizes: round the first two, remainder to test."""
    if n < MIN_CLASS_SIZE:
        raise DataError(f"class of {n} samples is too small to split (need >= {MIN_CLASS_SIZE})")
    n_train = _round_half_up(RATIOS[0] * n)
    n_valid = _round_half_up(RATIOS[1] * n)
    return n_train, n_valid, n - n_train - n_valid


def split_dataset(index: DatasetIndex, seed: int) -> Split:
    train, valid, test = [], [], []
    for k, entry in enumerate(index.classes):
        n_train, n_valid, _ = split_counts(len(entry.files))
        order = np.random.default_rng([seed, k]).permutation(len(entry.files))
        files = [entry.files[i] for i in order]
        train += [(f, k) for f in files[:n_train]]
        valid += [(f, k) for f in files[n_train:n_train + n_valid]]
        test += [(f, k) for f in files[n_train + n_valid:]]
    return Split(train, valid, test, seed)


def write_manifest(split: Split, path, root) -> None:
    root = Path(root)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "class_index", "partition"])
        for part in ("train", "valid", "test"):
            for f, k in split.part(part):
                w.writerow([Path(f).relative_to(root).as_posix(), k, part])


def read_manifest(path, root) -> Split:
    root = Path(root)
    parts = {"train": [], "valid": [], "test": []}
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                parts[row["partition"]].append((root / row["path"], int(row["class_index"])))
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read split manifest {path}: {exc}") from exc
    return Split(**parts)


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with corner pixels aligned between source and target grids."""
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.astype(np.float64)
    img = image.astype(np.float64)
    ys = np.linspace(0, h - 1, height) if height > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, width) if width > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def load_image(path, target: int = 224, dtype=np.float32) -> np.ndarray:
    """Decode to RGB, bilinear-resize to ``target`` x ``target``, scale to [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    out = resize_bilinear(arr, target, target) / 255.0
    return np.clip(out, 0.0, 1.0).astype(dtype)


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image centre; bilinear sampling, zero fill."""
    h, w = image.shape[:2]
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    dy, dx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_y = cy + cos * dy + sin * dx
    src_x = cx - sin * dy + cos * dx
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)))
    y0 = np.floor(src_y)
    x0 = np.floor(src_x)
    wy = (src_y - y0)[..., None]
    wx = (src_x - x0)[..., None]
    # indices into the 1-pixel zero border; anything further out reads zero
    y0 = np.clip(y0.astype(int) + 1, 0, h + 1)
    x0 = np.clip(x0.astype(int) + 1, 0, w + 1)
    y1 = np.clip(y0 + 1, 0, h + 1)
    x1 = np.clip(x0 + 1, 0, w + 1)
    out = (padded[y0, x0] * (1 - wy) * (1 - wx) + padded[y0, x1] * (1 - wy) * wx
           + padded[y1, x0] * wy * (1 - wx) + padded[y1, x1] * wy * wx)
    outside = (src_y < -1) | (src_y > h) | (src_x < -1) | (src_x > w)
    out[outside] = 0
    return out.astype(image.dtype)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random rotation, then horizontal/vertical flips, then multiplicative brightness with clamp."""
    out = image
    if cfg.rotation_degrees:
        angle = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees)
        out = rotate(out, angle)
    if cfg.horizontal_flip_prob and rng.random() < cfg.horizontal_flip_prob:
        out = out[:, ::-1]
    if cfg.vertical_flip_prob and rng.random() < cfg.vertical_flip_prob:
        out = out[::-1]
    if cfg.brightness_delta:
        factor = rng.uniform(1 - cfg.brightness_delta, 1 + cfg.brightness_delta)
        out = out * factor
    return np.ascontiguousarray(np.clip(out, 0, 1), dtype=image.dtype)


class ImageStore:
    """Decoded-image cache keyed by path; decoding the same file twice is wasted work."""

    def __init__(self, target: int = 224, dtype=np.float32):
        self.target = target
        self.dtype = dtype
        self._cache: dict[Path, np.ndarray] = {}

    def __getitem__(self, path) -> np.ndarray:
        path = Path(path)
        img = self._cache.get(path)
        if img is None:
            img = self._cache[path] = load_image(path, self.target, self.dtype)
        return img

    def stack(self, paths) -> np.ndarray:
        return np.stack([self[p] for p in paths])


@dataclass
class ArraySamples:
    """In-memory samples: images (N, S, S, 3) in [0, 1] and integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def _fetch(part, store: ImageStore):
    if isinstance(part, ArraySamples):
        return lambda i: (part.images[i], int(part.labels[i]))
    return lambda i: (store[part[i][0]], part[i][1])


def batch_iterator(part, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0,
                   augment_cfg: AugmentConfig | None = None, store: ImageStore | None = None):
    """Yield (images, labels) batches covering ``part`` exactly once.

    ``part`` is a list of (path, label) pairs or an :class:`ArraySamples`.  With
    ``shuffle_seed`` set, the order is a permutation drawn from
    ``(shuffle_seed, epoch)``; with ``None`` the stored order is kept.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if len(part) == 0:
        raise DataError("cannot iterate over an empty split part")
    fetch = _fetch(part, store or ImageStore())
    order = np.arange(len(part))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(part))
    aug_rng = np.random.default_rng([shuffle_seed or 0, epoch, 1])
    for start in range(0, len(order), batch_size):
        images, labels = [], []
        for i in order[start:start + batch_size]:
            img, label = fetch(i)
            if augment_cfg is not None:
                img = augment(img, augment_cfg, aug_rng)
            images.append(img)
            labels.append(label)
        yield np.stack(images), np.array(labels, dtype=np.int64)


def synthetic_image(class_index: int, num_classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Oriented stripes whose angle, frequency and tint are fixed per class; phase and noise vary."""
    angle = math.pi * class_index / num_classes
    freq = 2.0 + 3.0 * ((class_index * 7) % num_classes) / num_classes
    hue = 2 * math.pi * class_index / num_classes
    tint = 0.5 + 0.4 * np.cos(hue + np.array([0.0, 2.0944, 4.1888]))
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    phase = rng.uniform(0, 2 * math.pi)
    wave = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)
    img = wave[..., None] * tint[None, None, :] + 0.1
    img = img + rng.normal(0, 0.05, img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def generate_synthetic_dataset(num_classes: int, per_class: int, seed: int, out_dir, size: int = 64) -> Path:
    """Write ``per_class`` PNGs per class under ``out_dir/synth_XX/``."""
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for k in range(num_classes):
            d = out / f"synth_{k:02d}"
            d.mkdir(exist_ok=True)
            rng = np.random.default_rng([seed, k])
            for i in range(per_class):
                Image.fromarray(synthetic_image(k, num_classes, size, rng)).save(d / f"img_{i:04d}.png")
    except OSError as exc:
        raise DataError(f"cannot write synthetic dataset to {out}: {exc}") from exc
    return out
