"""Seeded synthetic patch-classification data and a small image-folder loader."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif")


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, H, W] float64
    labels: np.ndarray  # [n] int64
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")


def synthetic_patches(
    num_samples: int,
    *,
    num_classes: int = 10,
    image_size: int = 16,
    patch_size: int = 4,
    in_channels: int = 1,
    informative: float = 0.6,
    noise: float = 1.0,
    seed: int = 0,
    split: int = 0,
) -> Dataset:
    """Images whose patches carry class-dependent statistics.

    Each class owns one mean pattern per patch position, drawn from ``seed``.
    In a sample every patch shows its own class pattern with probability
    ``informative`` and a random other class's pattern otherwise, plus
    Gaussian noise of scale ``noise``.  ``split`` selects an independent
    sample stream over the same class patterns (0 = train, 1 = eval, ...).
    """
    if image_size % patch_size:
        raise ValueError("image_size must be divisible by patch_size")
    g = image_size // patch_size
    num_patches = g * g
    templates = np.random.default_rng([seed, 0]).standard_normal((num_classes, num_patches, in_channels, patch_size, patch_size))
    rng = np.random.default_rng([seed, 1 + split])
    labels = np.arange(num_samples) % num_classes
    rng.shuffle(labels)
    source = np.repeat(labels[:, None], num_patches, axis=1)
    off = rng.random((num_samples, num_patches)) >= informative
    other = (labels[:, None] + rng.integers(1, num_classes, size=(num_samples, num_patches))) % num_classes
    source = np.where(off, other, source)
    patches = templates[source, np.arange(num_patches)[None, :]]  # [n, P, C, p, p]
    patches = patches + noise * rng.standard_normal(patches.shape)
    images = patches.reshape(num_samples, g, g, in_channels, patch_size, patch_size).transpose(0, 3, 1, 4, 2, 5)
    images = images.reshape(num_samples, in_channels, image_size, image_size)
    return Dataset(np.ascontiguousarray(images), labels.astype(np.int64), num_classes)


def load_image_folder(root: str | Path, image_size: int, in_channels: int = 3) -> tuple[Dataset, Dataset, list[str]]:
    """Load ``root/{train,val}/<class_name>/<image>`` into two datasets.

    Class order is the sorted directory names of ``train``.  Images are
    resized to ``image_size`` squared, scaled to [0, 1], then standardised
    per channel with the training-split mean and std.
    """
    from PIL import Image

    root = Path(root)
    classes = sorted(p.name for p in (root / "train").iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"no class directories under {root / 'train'}")
    mode = {1: "L", 3: "RGB"}.get(in_channels)
    if mode is None:
        raise ValueError("in_channels must be 1 or 3 for image folders")

    def read(split: str) -> tuple[np.ndarray, np.ndarray]:
        images, labels = [], []
        for label, name in enumerate(classes):
            folder = root / split / name
            if not folder.is_dir():
                continue
            for path in sorted(folder.iterdir()):
                if path.suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                with Image.open(path) as im:
                    arr = np.asarray(im.convert(mode).resize((image_size, image_size)), dtype=np.float64) / 255.0
                images.append(arr[None] if in_channels == 1 else arr.transpose(2, 0, 1))
                labels.append(label)
        if not images:
            raise ValueError(f"no images found under {root / split}")
        return np.stack(images), np.asarray(labels, dtype=np.int64)

    x_train, y_train = read("train")
    x_val, y_val = read("val")
    mean = x_train.mean(axis=(0, 2, 3), keepdims=True)
    std = x_train.std(axis=(0, 2, 3), keepdims=True) + 1e-8
    return (
        Dataset((x_train - mean) / std, y_train, len(classes)),
        Dataset((x_val - mean) / std, y_val, len(classes)),
        classes,
    )
