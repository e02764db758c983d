"""Dataset indexing (MVTec-style and flat layouts), image loading, and the
seeded synthetic defect dataset used for desk-scale runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
NORMAL_DIRS = {"good", "normal"}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: str
    category: str
    label: int  # 0 normal, 1 abnormal
    mask_path: str | None = None
    defect: str = "good"

    @property
    def mask_missing(self) -> bool:
        return self.label == 1 and self.mask_path is None


@dataclass(frozen=True)
class DatasetIndex:
    records: tuple
    split: str = "test"
    root: str = ""

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def categories(self) -> list[str]:
        return sorted({r.category for r in self.records})

    def by_category(self, name: str) -> list[Record]:
        return [r for r in self.records if r.category == name]


def _images(d: Path):
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _find_mask(mask_dir: Path, stem: str):
    for name in (f"{stem}_mask", stem):
        for suffix in (".png", ".bmp", ".jpg", ".tif"):
            p = mask_dir / f"{name}{suffix}"
            if p.exists():
                return str(p)
    return None


def ingest(root, layout: str = "mvtec", split: str = "test") -> DatasetIndex:
    """Index a dataset tree.

    ``mvtec``: ``<root>/<category>/<split>/<good|defect>/*.png`` with masks at
    ``<root>/<category>/ground_truth/<defect>/<stem>_mask.png``.
    ``flat``: ``<root>/<category>/<normal|abnormal>/*.png`` with masks at
    ``<root>/<category>/masks/<stem>.png``.
    Records are path-sorted.  Abnormal images without a mask are kept but
    flagged (``mask_missing``) and excluded from pixel metrics.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    records = []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if layout == "mvtec":
            split_dir = cat_dir / split
            if not split_dir.is_dir():
                continue
            groups = [(d, d.name, cat_dir / "ground_truth" / d.name) for d in sorted(split_dir.iterdir()) if d.is_dir()]
        elif layout == "flat":
            groups = [(d, d.name, cat_dir / "masks") for d in sorted(cat_dir.iterdir())
                      if d.is_dir() and d.name in ("normal", "abnormal")]
        else:
            raise DatasetError(f"unknown layout {layout!r}")
        found = []
        for d, defect, mask_dir in groups:
            label = 0 if defect in NORMAL_DIRS else 1
            for img in _images(d):
                mask = _find_mask(mask_dir, img.stem) if label else None
                if label and mask is None:
                    logger.warning("no mask for abnormal image %s; excluded from pixel metrics", img)
                found.append(Record(str(img), cat_dir.name, label, mask, defect))
        if not found:
            raise DatasetError(f"category {cat_dir.name!r} has no images under {layout} layout")
        records.extend(found)
    if not records:
        raise DatasetError(f"no categories found under {root}")
    records.sort(key=lambda r: r.path)
    return DatasetIndex(tuple(records), split, str(root))


def load_image(path, resolution: int) -> torch.Tensor:
    """(3, R, R) float tensor in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_mask(path, resolution: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.NEAREST)
        return np.asarray(im) > 127


def record_mask(record: Record, resolution: int) -> np.ndarray | None:
    """Ground-truth mask, all-zero for normal images, None when missing."""
    if record.label == 0:
        return np.zeros((resolution, resolution), dtype=bool)
    if record.mask_path is None:
        return None
    return load_mask(record.mask_path, resolution)


# -- synthetic defects --------------------------------------------------------

def synthetic_image(rng: np.random.Generator, resolution: int, base_color, anomalous: bool):
    """Textured flat-colour image, optionally with a dark noisy elliptical defect.

    Returns ``(image (R, R, 3) float in [0, 1], mask (R, R) bool)``.
    """
    R = resolution
    yy, xx = np.mgrid[0:R, 0:R].astype(np.float64)
    color = np.clip(np.asarray(base_color) + rng.normal(0, 0.02, 3), 0, 1)
    freq = rng.uniform(1.0, 3.0, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    texture = 0.04 * np.sin(2 * np.pi * (freq[0] * xx + freq[1] * yy) / R + phase)
    img = color[None, None, :] + texture[..., None] + rng.normal(0, 0.015, (R, R, 3))
    mask = np.zeros((R, R), dtype=bool)
    if anomalous:
        cy, cx = rng.uniform(0.2 * R, 0.8 * R, size=2)
        ry, rx = rng.uniform(0.08 * R, 0.17 * R, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        defect = color - 0.35 + rng.normal(0, 0.08, (R, R, 3))
        img = np.where(mask[..., None], defect, img)
    return np.clip(img, 0.0, 1.0), mask


def category_color(index: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, 7, index])
    return rng.uniform(0.45, 0.8, size=3)


def write_synthetic_dataset(root, n_per_category: int = 16, categories=("alpha", "beta"),
                            resolution: int = 64, seed: int = 0, anomaly_fraction: float = 0.5) -> Path:
    """Write an MVTec-style tree of synthetic images and masks under ``root``."""
    root = Path(root)
    for ci, cat in enumerate(categories):
        rng = np.random.default_rng([seed, ci])
        base = category_color(ci, seed)
        n_bad = int(round(n_per_category * anomaly_fraction))
        flags = np.array([1] * n_bad + [0] * (n_per_category - n_bad))
        rng.shuffle(flags)
        for i, bad in enumerate(flags):
            img, mask = synthetic_image(rng, resolution, base, bool(bad))
            sub = "defect" if bad else "good"
            out = root / cat / "test" / sub
            out.mkdir(parents=True, exist_ok=True)
            Image.fromarray((img * 255).round().astype(np.uint8)).save(out / f"{i:03d}.png")
            if bad:
                mdir = root / cat / "ground_truth" / sub
                mdir.mkdir(parents=True, exist_ok=True)
                Image.fromarray(mask.astype(np.uint8) * 255).save(mdir / f"{i:03d}_mask.png")
    return root
