"""Image I/O, dataset manifests, augmentation and the synthetic chest X-ray generator."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DatasetError, ValidationError
from .hog import extract_roi, resize_image, roi_crop
from .model import CLASS_NAMES

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm")


# ---------------------------------------------------------------- image files

def read_image(path):
    """Load an 8-bit grayscale PNG/PGM as float64 in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ValidationError(f"{path}: unsupported image type (expected PNG or PGM)")
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.float64)
    return arr / 255.0


def to_uint8(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image):
    """Write a [0, 1] grayscale (H, W) or RGB (H, W, 3) image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


# ---------------------------------------------------------------- manifests

@dataclass
class DatasetEntry:
    path: str
    label: int
    split: str

    @property
    def label_name(self):
        return CLASS_NAMES[self.label]


@dataclass
class DatasetManifest:
    entries: list
    seed: int
    skipped: list = field(default_factory=list)

    def split(self, name):
        if name == "all":
            return list(self.entries)
        return [e for e in self.entries if e.split == name]

    def counts(self):
        out = {}
        for name in CLASS_NAMES:
            es = [e for e in self.entries if e.label_name == name]
            out[name] = {"train": sum(e.split == "train" for e in es), "test": sum(e.split == "test" for e in es)}
        return out


def n_test_for(n, test_fraction=0.2):
    return int(np.floor(n * test_fraction + 0.5))


def stratified_split(paths_by_class, seed, test_fraction=0.2):
    """Seeded per-class split into train/test entries (classes in fixed order)."""
    rng = np.random.default_rng(seed)
    entries = []
    for label, name in enumerate(CLASS_NAMES):
        paths = list(paths_by_class.get(name, []))
        perm = rng.permutation(len(paths))
        test_idx = set(perm[:n_test_for(len(paths), test_fraction)].tolist())
        entries += [DatasetEntry(p, label, "test" if i in test_idx else "train") for i, p in enumerate(paths)]
    seen = set()
    for e in entries:
        if e.path in seen:
            raise DatasetError(f"duplicate path {e.path}")
        seen.add(e.path)
    return entries


def load_dataset(root_dir, seed=0, test_fraction=0.2) -> DatasetManifest:
    """Index ``root/{covid,pneumonia,normal}/*.{png,pgm}`` and split it 80/20 per class."""
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    by_class, skipped = {}, []
    for name in CLASS_NAMES:
        d = root / name
        if not d.is_dir():
            raise DatasetError(f"missing class directory {name!r} under {root}", label=name)
        files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        good = []
        for p in files:
            try:
                read_image(p)
            except (OSError, ValueError) as exc:
                skipped.append(str(p))
                log.warning("skipping unreadable image %s: %s", p, exc)
                continue
            good.append(str(p))
        if not good:
            raise DatasetError(f"class {name!r} has no readable images under {d}", label=name)
        by_class[name] = good
    if skipped:
        log.warning("%d unreadable image(s) skipped", len(skipped))
    return DatasetManifest(stratified_split(by_class, seed, test_fraction), seed, skipped)


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentationConfig:
    rotation_max_deg: float = 10.0
    shift_max_frac: float = 0.10
    hflip_prob: float = 0.5
    brightness_range: tuple = (0.8, 1.2)
    target_size: tuple = (64, 64)
    mean: float = 0.5
    std: float = 0.5

    def __post_init__(self):
        lo, hi = self.brightness_range
        if self.rotation_max_deg < 0 or self.shift_max_frac < 0 or not 0 < lo <= hi:
            raise ValidationError("augmentation ranges must be non-negative and ordered")
        if not 0 <= self.hflip_prob <= 1:
            raise ValidationError("hflip_prob must lie in [0, 1]")
        if self.std <= 0:
            raise ValidationError("std must be positive")

    @classmethod
    def identity(cls, **kw):
        return cls(rotation_max_deg=0.0, shift_max_frac=0.0, hflip_prob=0.0, brightness_range=(1.0, 1.0), **kw)


def hflip(image):
    return np.asarray(image)[:, ::-1]


def normalize(image, cfg: AugmentationConfig):
    return (image - cfg.mean) / cfg.std


def augment(image, cfg: AugmentationConfig, rng):
    """Random rotation, shift, flip and brightness, then resize and normalise.

    Every random draw is taken regardless of magnitude so the generator
    advances identically for any configuration.
    """
    img = np.asarray(image, dtype=np.float64)
    angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)
    shift = rng.uniform(-cfg.shift_max_frac, cfg.shift_max_frac, size=2) * np.array(img.shape)
    flip = rng.random() < cfg.hflip_prob
    gain = rng.uniform(*cfg.brightness_range)
    if angle != 0:
        img = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=0.0)
    if np.any(shift != 0):
        img = ndimage.shift(img, shift, order=1, mode="constant", cval=0.0)
    if flip:
        img = hflip(img)
    img = np.clip(img * gain, 0.0, 1.0)
    img = resize_image(img, *cfg.target_size)
    return normalize(img, cfg)


def prepare(image, target_size=(64, 64), roi=False):
    """Optional ROI crop, then resize to ``target_size``; values stay in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if roi:
        img = roi_crop(img, extract_roi(img))
    if img.shape != tuple(target_size):
        img = resize_image(img, *target_size)
    return img


def load_split(manifest: DatasetManifest, split, target_size=(64, 64), roi=False):
    """Images of one split, prepared to ``target_size``, plus labels."""
    entries = manifest.split(split)
    images = np.stack([prepare(read_image(e.path), target_size, roi) for e in entries]) if entries \
        else np.zeros((0,) + tuple(target_size))
    return images, np.array([e.label for e in entries], dtype=np.int64)


# ---------------------------------------------------------------- synthetic data

def _gaussian(shape, cy, cx, sigma):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))


def synthesize_sample(label, rng, size=64):
    """One synthetic chest image with its ground truth.

    Returns ``(image, lung_mask, lesion_mask)``. Two bright elliptical lung
    fields sit on a darker torso. Covid adds several small bright patches
    inside the fields, pneumonia one large diffuse region in one field,
    normal nothing. Gaussian noise sigma 0.05, clipped to [0, 1].
    """
    if isinstance(label, str):
        label = CLASS_NAMES.index(label)
    s = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = 0.12 + 0.04 * yy / size
    torso = ((yy - size * 0.55) / (size * 0.48)) ** 2 + ((xx - size / 2) / (size * 0.44)) ** 2 <= 1
    img = img + 0.12 * torso

    lung = np.zeros((size, size), dtype=bool)
    cy = size * 0.5 + rng.uniform(-2, 2) * s
    for side in (-1, 1):
        cx = size / 2 + side * (13 + rng.uniform(-1.5, 1.5)) * s
        ry = (18 + rng.uniform(-2, 2)) * s
        rx = (8.5 + rng.uniform(-1, 1)) * s
        lung |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    lung_level = 0.45 + rng.uniform(-0.05, 0.05)
    img = img + ndimage.gaussian_filter(lung.astype(np.float64), 1.0) * lung_level

    added = np.zeros((size, size))
    ly, lx = np.nonzero(lung)
    if CLASS_NAMES[label] == "covid":
        for _ in range(int(rng.integers(4, 8))):
            k = rng.integers(len(ly))
            added += rng.uniform(0.25, 0.4) * _gaussian(img.shape, ly[k], lx[k], rng.uniform(1.2, 2.0) * s)
        added *= lung
    elif CLASS_NAMES[label] == "pneumonia":
        side_mask = lung & ((xx < size / 2) if rng.random() < 0.5 else (xx >= size / 2))
        sy, sx = np.nonzero(side_mask)
        k = rng.integers(len(sy))
        added += rng.uniform(0.3, 0.4) * _gaussian(img.shape, sy[k], sx[k], rng.uniform(5.0, 7.0) * s)
        added *= side_mask
    img = img + added + rng.normal(0.0, 0.05, img.shape)
    return np.clip(img, 0.0, 1.0), lung, added > 0.05


def generate_synthetic(out_dir, n_per_class, seed):
    """Write ``n_per_class`` PNGs per class under ``out_dir/<class>/`` plus
    ``manifest.csv``; returns the list of (relative path, class name)."""
    if n_per_class < 10:
        raise ValidationError("n_per_class must be >= 10")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    rows = []
    for name in CLASS_NAMES:
        (out / name).mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            img, _, _ = synthesize_sample(name, rng)
            rel = f"{name}/{name}_{i:04d}.png"
            write_png(out / rel, img)
            rows.append((rel, name))
    tmp = out / "manifest.csv.tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "label"])
        w.writerows(rows)
    os.replace(tmp, out / "manifest.csv")
    return rows
