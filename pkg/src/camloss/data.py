"""Datasets: synthetic shapes with object masks, CIFAR-10 binary batches, augmentation, batching."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint

SHAPES = ("circle", "square", "triangle", "cross")
CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

NOISE_LEVEL = 0.35
SHAPE_INTENSITY = (0.75, 1.0)
AREA_RANGE = (0.04, 0.25)
PAD = 4


@dataclass
class Sample:
    image: np.ndarray  # [C,H,W] in [0,1]
    label: int
    mask: np.ndarray | None = None  # [H,W] bool


@dataclass
class Dataset:
    images: np.ndarray  # [N,C,H,W] float32
    labels: np.ndarray  # [N] int64
    class_count: int
    name: str = "dataset"
    masks: np.ndarray | None = None  # [N,H,W] bool

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError(f"dataset {self.name!r} is empty")
        if len(self.labels) != len(self.images):
            raise ValueError("labels and images differ in length")
        if self.masks is not None and self.masks.shape != (
            self.images.shape[0],
            *self.images.shape[2:],
        ):
            raise ValueError("mask shape does not match images")

    @property
    def has_masks(self) -> bool:
        return self.masks is not None

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        mask = None if self.masks is None else self.masks[i]
        return Sample(self.images[i], int(self.labels[i]), mask)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.intp)
        masks = None if self.masks is None else self.masks[indices]
        return Dataset(self.images[indices], self.labels[indices], self.class_count, self.name, masks)


# ----------------------------------------------------------------- synthetic


def shape_mask(kind: str, size: int, cy: float, cx: float, extent: float) -> np.ndarray:
    """Rasterise a shape by testing pixel centres; ``extent`` is its half-size in pixels."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= extent * extent
    if kind == "square":
        return (np.abs(dy) <= extent) & (np.abs(dx) <= extent)
    if kind == "triangle":
        # upright isosceles: apex at the top, base at the bottom
        inside_y = (dy >= -extent) & (dy <= extent)
        half_width = (dy + extent) / 2.0
        return inside_y & (np.abs(dx) <= half_width)
    if kind == "cross":
        arm = extent / 3.0
        return ((np.abs(dy) <= extent) & (np.abs(dx) <= arm)) | (
            (np.abs(dx) <= extent) & (np.abs(dy) <= arm)
        )
    raise ValueError(f"unknown shape {kind!r}")


# area of each shape as a multiple of extent**2
_AREA_FACTOR = {"circle": np.pi, "square": 4.0, "triangle": 2.0, "cross": 20.0 / 9.0}


def _render(rng: np.random.Generator, label: int, size: int, channels: int, clutter: int):
    background = rng.uniform(0.0, NOISE_LEVEL, size=(size, size))
    image = background.copy()
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(clutter):
        # class-independent soft blob
        by, bx = rng.uniform(0, size, size=2)
        sigma = rng.uniform(0.04, 0.09) * size
        peak = rng.uniform(0.5, 0.9)
        image += peak * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma * sigma))
    kind = SHAPES[label]
    for _ in range(100):
        area = rng.uniform(0.06, 0.18) * size * size
        extent = np.sqrt(area / _AREA_FACTOR[kind])
        margin = extent + 1
        cy, cx = rng.uniform(margin, size - margin, size=2)
        mask = shape_mask(kind, size, cy, cx, extent)
        frac = mask.mean()
        if AREA_RANGE[0] <= frac <= AREA_RANGE[1]:
            break
    else:  # pragma: no cover - the area draw keeps fractions well inside the range
        raise RuntimeError("could not place a shape within the area bounds")
    intensity = rng.uniform(*SHAPE_INTENSITY)
    image = np.clip(image, 0.0, 1.0)
    image[mask] = intensity
    image = np.repeat(image[None], channels, axis=0)
    return image.astype(np.float32), mask, background


def gen_shapes(count: int, class_count: int = 4, image_size: int = 64, clutter: int = 3,
               seed: int = 0, channels: int = 1) -> Dataset:
    """One class-defining shape per image over uniform noise plus ``clutter`` soft blobs.

    Class 0..3 = circle, square, triangle, cross. Labels cycle through the
    classes so counts differ by at most one. Each sample draws from its own
    stream keyed by (seed, index).
    """
    if class_count not in (2, 3, 4):
        raise ValueError(f"class_count must be 2, 3 or 4, got {class_count}")
    if image_size < 32:
        raise ValueError(f"image_size must be at least 32, got {image_size}")
    if count < 1:
        raise ValueError("count must be positive")
    images = np.empty((count, channels, image_size, image_size), np.float32)
    masks = np.empty((count, image_size, image_size), bool)
    labels = np.arange(count, dtype=np.int64) % class_count
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        images[i], masks[i], _ = _render(rng, int(labels[i]), image_size, channels, clutter)
    return Dataset(images, labels, class_count, f"shapes-{class_count}-{image_size}-s{seed}", masks)


def shapes_background(seed: int, index: int, image_size: int = 64) -> np.ndarray:
    """The clutter-free noise background that :func:`gen_shapes` drew for one sample."""
    rng = np.random.default_rng([seed, index])
    return rng.uniform(0.0, NOISE_LEVEL, size=(image_size, image_size))


def save_dataset(path, ds: Dataset) -> None:
    tensors = {
        "images": ds.images,
        "labels": ds.labels.astype(np.float32),
        "meta.class_count": np.array([ds.class_count], np.float32),
    }
    if ds.masks is not None:
        tensors["masks"] = ds.masks.astype(np.float32)
    checkpoint.write(path, tensors)


def load_dataset(path) -> Dataset:
    tensors = checkpoint.read(path)
    try:
        images = tensors["images"]
        labels = tensors["labels"].astype(np.int64)
        class_count = int(tensors["meta.class_count"][0])
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"dataset cache lacks {exc.args[0]!r}") from exc
    masks = tensors["masks"].astype(bool) if "masks" in tensors else None
    return Dataset(images, labels, class_count, Path(path).stem, masks)


# ------------------------------------------------------------------ CIFAR-10


class CifarFormatError(ValueError):
    pass


def parse_cifar10_batch(blob: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Parse 3073-byte records into (uint8 images [N,3,32,32], labels [N])."""
    if len(blob) % CIFAR_RECORD:
        offset = len(blob) - len(blob) % CIFAR_RECORD
        raise CifarFormatError(
            f"truncated record at offset {offset}: {len(blob) % CIFAR_RECORD} of {CIFAR_RECORD} bytes"
        )
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise CifarFormatError(
            f"label byte {labels[bad[0]]} > 9 at offset {bad[0] * CIFAR_RECORD}"
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def encode_cifar10_batch(images: np.ndarray, labels: np.ndarray) -> bytes:
    records = np.empty((len(labels), CIFAR_RECORD), np.uint8)
    records[:, 0] = labels
    records[:, 1:] = np.asarray(images, np.uint8).reshape(len(labels), -1)
    return records.tobytes()


def load_cifar10(directory, split: str = "train") -> Dataset:
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    images, labels = [], []
    for fname in files:
        path = os.path.join(directory, fname)
        with open(path, "rb") as fh:
            img, lab = parse_cifar10_batch(fh.read())
        images.append(img)
        labels.append(lab)
    pixels = np.concatenate(images).astype(np.float32) / 255.0
    return Dataset(pixels, np.concatenate(labels), 10, f"cifar10-{split}")


# ------------------------------------------------------------- augmentation


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Zero-pad 4, random crop back to size, horizontal flip with p=0.5; the mask follows."""
    dy, dx = rng.integers(0, 2 * PAD + 1, size=2)
    flip = rng.random() < 0.5
    return _crop_flip(sample, int(dy), int(dx), bool(flip))


def _crop_flip(sample: Sample, dy: int, dx: int, flip: bool) -> Sample:
    _, h, w = sample.image.shape
    padded = np.pad(sample.image, ((0, 0), (PAD, PAD), (PAD, PAD)))
    image = padded[:, dy : dy + h, dx : dx + w]
    mask = None
    if sample.mask is not None:
        mask = np.pad(sample.mask, PAD)[dy : dy + h, dx : dx + w]
    if flip:
        image = image[:, :, ::-1]
        mask = None if mask is None else mask[:, ::-1]
    return Sample(
        np.ascontiguousarray(image),
        sample.label,
        None if mask is None else np.ascontiguousarray(mask),
    )


def augment_batch(ds: Dataset, indices, seed: int, epoch: int) -> np.ndarray:
    """Augmented images for ``indices``; sample i uses stream (seed, epoch, i)."""
    out = np.empty((len(indices),) + ds.images.shape[1:], ds.images.dtype)
    for row, i in enumerate(indices):
        sample = Sample(ds.images[i], int(ds.labels[i]))
        out[row] = augment(sample, sample_rng(seed, epoch, int(i))).image
    return out


def batches(n: int, batch_size: int, epoch: int, seed: int) -> list[np.ndarray]:
    """Seeded permutation of range(n) cut into batches; the short last batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
