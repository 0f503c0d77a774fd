"""Dataset ingestion, splitting, preprocessing, and augmentation.

Expected layout under a dataset root::

    root/images/*.jpg|*.jpeg|*.png
    root/masks/*.png

Images and masks are paired by identical basenames.  Masks are thresholded
at 127/255 to strict {0, 1}.  Splits are deterministic: ids are sorted
lexicographically, shuffled with a seeded RNG, and cut at the published
train count when the total matches a known dataset size (2150 -> 1500,
2694 -> 1886 at ratio 0.7), else at floor(n * ratio).
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import ConfigError, PairingError

__all__ = [
    "Sample",
    "SplitManifest",
    "discover_pairs",
    "load_dataset",
    "split",
    "preprocess",
    "augment",
    "compute_normalization",
    "make_synthetic_samples",
    "IMAGENET_MEAN",
    "IMAGENET_STD",
]

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
MASK_EXTENSIONS = (".png",)

# fallback normalization constants (standard ImageNet channel statistics),
# used when dataset statistics have not been computed
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# published train-set sizes for known dataset totals at the 7:3 ratio; no
# single rounding rule reproduces both, so the counts are pinned explicitly
KNOWN_TRAIN_COUNTS = {2150: 1500, 2694: 1886}


@dataclass
class Sample:
    """One image/mask pair: uint8 RGB (H, W, 3) and binary {0,1} (H, W)."""

    image: np.ndarray
    mask: np.ndarray
    id: str


@dataclass
class SplitManifest:
    """Deterministic train/test id assignment plus its provenance."""

    dataset_name: str
    train_ids: list[str]
    test_ids: list[str]
    seed: int
    ratio: float
    normalization: dict | None = field(default=None)

    def save(self, path) -> None:
        """Persist as a JSON header line followed by `id,split` lines."""
        header = {
            "dataset_name": self.dataset_name,
            "seed": self.seed,
            "ratio": self.ratio,
            "normalization": self.normalization,
        }
        lines = [json.dumps(header, sort_keys=True)]
        lines += [f"{i},train" for i in self.train_ids]
        lines += [f"{i},test" for i in self.test_ids]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        raw = Path(path).read_text().splitlines()
        if not raw:
            raise ValueError(f"empty split manifest: {path}")
        header = json.loads(raw[0])
        train, test = [], []
        for line in raw[1:]:
            if not line.strip():
                continue
            sample_id, _, tag = line.rpartition(",")
            if tag == "train":
                train.append(sample_id)
            elif tag == "test":
                test.append(sample_id)
            else:
                raise ValueError(f"bad manifest line: {line!r}")
        return cls(
            dataset_name=header["dataset_name"],
            train_ids=train,
            test_ids=test,
            seed=header["seed"],
            ratio=header["ratio"],
            normalization=header.get("normalization"),
        )


def discover_pairs(root) -> list[tuple[str, Path, Path]]:
    """Pair image and mask files under `root` by basename, without decoding.

    Returns (id, image_path, mask_path) triples sorted by id.  Raises
    PairingError when any file lacks a partner, FileNotFoundError when the
    layout directories are missing, and ValueError when nothing is paired.
    """
    root = Path(root)
    image_dir = root / "images"
    mask_dir = root / "masks"
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"dataset root is missing directory: {d}")
    images: dict[str, Path] = {}
    for p in sorted(image_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        if p.stem in images:
            raise PairingError(f"duplicate image basename: {p.stem}")
        images[p.stem] = p
    masks: dict[str, Path] = {}
    for p in sorted(mask_dir.iterdir()):
        if p.suffix.lower() not in MASK_EXTENSIONS:
            continue
        if p.stem in masks:
            raise PairingError(f"duplicate mask basename: {p.stem}")
        masks[p.stem] = p
    orphan_images = sorted(set(images) - set(masks))
    orphan_masks = sorted(set(masks) - set(images))
    if orphan_images or orphan_masks:
        def clip(ids):
            return ids[:10] + ([f"... and {len(ids) - 10} more"] if len(ids) > 10 else [])
        raise PairingError(
            f"unpaired files under {root}: "
            f"images without masks {clip(orphan_images)}, "
            f"masks without images {clip(orphan_masks)}"
        )
    if not images:
        raise ValueError(f"empty dataset: no image/mask pairs under {root}")
    return [(stem, images[stem], masks[stem]) for stem in sorted(images)]


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise OSError(f"unreadable image {path}: {exc}") from exc


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"))
    except OSError as exc:
        raise OSError(f"unreadable mask {path}: {exc}") from exc
    return (gray > 127).astype(np.uint8)


def load_dataset(root) -> list[Sample]:
    """Load every paired sample under `root` with masks binarized to {0, 1}."""
    samples = []
    for stem, image_path, mask_path in discover_pairs(root):
        image = _read_image(image_path)
        mask = _read_mask(mask_path)
        if image.shape[:2] != mask.shape:
            raise ValueError(
                f"sample {stem}: image {image.shape[:2]} and mask "
                f"{mask.shape} spatial dims differ"
            )
        samples.append(Sample(image=image, mask=mask, id=stem))
    return samples


def _sample_ids(samples) -> list[str]:
    return [s.id if isinstance(s, Sample) else str(s) for s in samples]


def split(samples, ratio: float = 0.7, seed: int = 42,
          dataset_name: str = "dataset") -> SplitManifest:
    """Assign samples to train/test deterministically.

    Ids are sorted, shuffled by a `random.Random(seed)`, and cut at the
    published train count for known totals (see KNOWN_TRAIN_COUNTS), else
    at floor(n * ratio).
    """
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    ids = sorted(_sample_ids(samples))
    if len(ids) < 2:
        raise ValueError(f"need at least 2 samples to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids")
    random.Random(seed).shuffle(ids)
    if abs(ratio - 0.7) < 1e-12 and len(ids) in KNOWN_TRAIN_COUNTS:
        n_train = KNOWN_TRAIN_COUNTS[len(ids)]
    else:
        n_train = math.floor(len(ids) * ratio)
    n_train = min(max(n_train, 1), len(ids) - 1)
    return SplitManifest(
        dataset_name=dataset_name,
        train_ids=ids[:n_train],
        test_ids=ids[n_train:],
        seed=seed,
        ratio=ratio,
    )


def preprocess(sample: Sample, size=(224, 224),
               mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Resize and normalize one sample into channel-first torch tensors.

    The image is bilinear-resized, scaled to [0, 1] and normalized per
    channel; the mask is nearest-neighbor resized, which keeps it binary.
    Returns (image (3, H, W) float32, mask (1, H, W) float32).
    """
    import torch

    h, w = size
    if h < 1 or w < 1:
        raise ValueError(f"degenerate target size {size}")
    if sample.image.size == 0 or sample.mask.size == 0:
        raise ValueError(f"sample {sample.id}: degenerate (0-pixel) input")
    image = Image.fromarray(sample.image).resize((w, h), Image.BILINEAR)
    mask = Image.fromarray(sample.mask).resize((w, h), Image.NEAREST)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    image_t = torch.from_numpy(arr.transpose(2, 0, 1).copy())
    mask_t = torch.from_numpy(np.asarray(mask, dtype=np.float32)[None])
    return image_t, mask_t


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    """Apply one shared geometric transform to an image/mask pair.

    Horizontal flip with p=0.5, vertical flip with p=0.5, then rotation by
    a uniformly chosen multiple of 90 degrees.  Draws exactly three values
    from `rng` so streams stay aligned across samples.
    """
    if rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        image, mask = image[::-1], mask[::-1]
    k = int(rng.integers(0, 4))
    if k:
        image = np.rot90(image, k, axes=(0, 1))
        mask = np.rot90(mask, k, axes=(0, 1))
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def compute_normalization(samples) -> tuple[list[float], list[float]]:
    """Per-channel mean/std of [0, 1]-scaled pixels over a sample list."""
    if not samples:
        raise ValueError("cannot compute normalization from an empty sample list")
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    n_pixels = 0
    for s in samples:
        x = s.image.reshape(-1, 3).astype(np.float64) / 255.0
        total += x.sum(axis=0)
        total_sq += (x * x).sum(axis=0)
        n_pixels += x.shape[0]
    mean = total / n_pixels
    var = np.maximum(total_sq / n_pixels - mean * mean, 1e-12)
    return mean.tolist(), np.sqrt(var).tolist()


def make_synthetic_samples(count: int = 8, size: int = 64,
                           seed: int = 0) -> list[Sample]:
    """Generate disk-lesion samples for smoke training and tests.

    Each sample is a textured background with one darker elliptical blob;
    the mask marks the blob.  Deterministic for a given seed.
    """
    rng = np.random.default_rng(seed)
    samples = []
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(count):
        base = rng.integers(140, 200, size=3)
        image = np.empty((size, size, 3), dtype=np.float64)
        for c in range(3):
            noise = rng.normal(0, 8, size=(size, size))
            image[:, :, c] = base[c] + noise
        cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
        ry = rng.uniform(0.12 * size, 0.3 * size)
        rx = rng.uniform(0.12 * size, 0.3 * size)
        blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        tint = rng.integers(30, 90, size=3)
        for c in range(3):
            image[:, :, c] = np.where(blob, tint[c] + rng.normal(0, 5), image[:, :, c])
        samples.append(Sample(
            image=np.clip(image, 0, 255).astype(np.uint8),
            mask=blob.astype(np.uint8),
            id=f"synthetic_{i:03d}",
        ))
    return samples
