"""Datasets: IDX ingestion, synthetic generators, splits and batching."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import BadMagic, CountMismatch, InvalidArgument, TruncatedFile

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled examples. ``inputs`` is n x d (vectors) or n x c x h x w (images in [0, 1])."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        inputs = np.asarray(self.inputs)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim not in (2, 4):
            raise InvalidArgument(f"inputs must be 2-D or 4-D, got shape {inputs.shape}")
        if labels.ndim != 1 or labels.shape[0] != inputs.shape[0]:
            raise InvalidArgument(
                f"labels length {labels.shape} does not match {inputs.shape[0]} inputs"
            )
        if self.num_classes < 1:
            raise InvalidArgument("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidArgument(f"labels must lie in [0, {self.num_classes})")
        if inputs.ndim == 4 and inputs.size and (inputs.min() < 0.0 or inputs.max() > 1.0):
            raise InvalidArgument("image inputs must lie in [0, 1]")
        inputs = inputs.copy()
        labels = labels.copy()
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_mode(self) -> bool:
        return self.inputs.ndim == 4

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, name or self.name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidArgument("train_fraction must be strictly between 0 and 1")


# -- IDX -------------------------------------------------------------------


def _read_header(buf: bytes, path, expected_magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(buf) < need:
        raise TruncatedFile(f"{path}: header needs {need} bytes, file has {len(buf)}")
    magic = struct.unpack(">i", buf[:4])[0]
    if magic != expected_magic:
        raise BadMagic(f"{path}: magic {magic}, expected {expected_magic}")
    return struct.unpack(f">{ndims}I", buf[4:need])


def load_idx(images_path, labels_path, num_classes: int = 10, name: str | None = None) -> Dataset:
    """Read an IDX image/label pair (MNIST layout) into an image-mode Dataset."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img = images_path.read_bytes()
    lab = labels_path.read_bytes()

    count, rows, cols = _read_header(img, images_path, IDX_IMAGE_MAGIC, 3)
    (n_labels,) = _read_header(lab, labels_path, IDX_LABEL_MAGIC, 1)

    n_pixels = count * rows * cols
    if len(img) - 16 < n_pixels:
        raise TruncatedFile(f"{images_path}: header declares {n_pixels} pixel bytes, found {len(img) - 16}")
    if len(lab) - 8 < n_labels:
        raise TruncatedFile(f"{labels_path}: header declares {n_labels} labels, found {len(lab) - 8}")
    if count != n_labels:
        raise CountMismatch(f"{count} images but {n_labels} labels")

    pixels = np.frombuffer(img, dtype=np.uint8, count=n_pixels, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n_labels, offset=8)
    inputs = pixels.reshape(count, 1, rows, cols).astype(np.float32) / np.float32(255.0)
    return Dataset(inputs, labels.astype(np.int64), num_classes, name or images_path.stem)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a single-channel image Dataset back to IDX (pixels re-quantised to bytes)."""
    if not dataset.image_mode or dataset.inputs.shape[1] != 1:
        raise InvalidArgument("write_idx needs single-channel image data")
    n, _, rows, cols = dataset.inputs.shape
    pixels = np.rint(dataset.inputs.reshape(n, rows, cols) * 255.0).astype(np.uint8)
    if dataset.labels.size and dataset.labels.max() > 255:
        raise InvalidArgument("IDX labels are single bytes")
    Path(images_path).write_bytes(
        struct.pack(">iIII", IDX_IMAGE_MAGIC, n, rows, cols) + pixels.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">iI", IDX_LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    )


# -- synthetic generators ----------------------------------------------------


def _balanced_counts(n: int, k: int) -> list[int]:
    return [n // k + (1 if c < n % k else 0) for c in range(k)]


def class_means(num_classes: int, dim: int, class_separation: float) -> np.ndarray:
    """Means on a circle in the first two coordinates; adjacent means are ``class_separation`` apart."""
    if num_classes == 1:
        return np.zeros((1, dim))
    radius = class_separation / (2.0 * math.sin(math.pi / num_classes))
    angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def gen_gaussian_mixture(
    seed: int,
    n: int,
    num_classes: int,
    dim: int,
    class_separation: float,
    noise_std: float,
    name: str = "gaussian_mixture",
) -> Dataset:
    if n <= 0 or dim <= 0 or num_classes <= 0:
        raise InvalidArgument("n, dim and num_classes must be positive")
    if not noise_std > 0:
        raise InvalidArgument("noise_std must be positive")
    if n < num_classes:
        raise InvalidArgument("need at least one example per class")
    if dim < 2 and num_classes > 1:
        raise InvalidArgument("class layout needs dim >= 2")

    rng = np.random.default_rng(seed)
    means = class_means(num_classes, dim, class_separation)
    labels = np.concatenate(
        [np.full(c, k, dtype=np.int64) for k, c in enumerate(_balanced_counts(n, num_classes))]
    )
    inputs = means[labels] + noise_std * rng.standard_normal((n, dim))
    order = rng.permutation(n)
    return Dataset(inputs[order], labels[order], num_classes, name)


def gen_two_moons(seed: int, n: int, noise_std: float, name: str = "two_moons") -> Dataset:
    if n < 2:
        raise InvalidArgument("two moons needs n >= 2")
    if noise_std < 0:
        raise InvalidArgument("noise_std must be non-negative")
    rng = np.random.default_rng(seed)
    n_outer, n_inner = _balanced_counts(n, 2)
    t_out = np.linspace(0.0, math.pi, n_outer)
    t_in = np.linspace(0.0, math.pi, n_inner)
    outer = np.stack([np.cos(t_out), np.sin(t_out)], axis=1)
    inner = np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1)
    inputs = np.concatenate([outer, inner])
    labels = np.concatenate([np.zeros(n_outer, np.int64), np.ones(n_inner, np.int64)])
    if noise_std > 0:
        inputs = inputs + noise_std * rng.standard_normal(inputs.shape)
    order = rng.permutation(n)
    return Dataset(inputs[order], labels[order], 2, name)


# -- splitting and batching --------------------------------------------------


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Shuffle with ``spec.seed`` and cut; the train side is rounded down."""
    n = len(dataset)
    if n == 0:
        raise InvalidArgument("cannot split an empty dataset")
    perm = np.random.default_rng(spec.seed).permutation(n)
    # guard against 0.29 * 100 == 28.999...
    n_train = int(math.floor(spec.train_fraction * n + 1e-9))
    return (
        dataset.subset(perm[:n_train], f"{dataset.name}/train"),
        dataset.subset(perm[n_train:], f"{dataset.name}/test"),
    )


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Yield index arrays covering a fresh permutation of ``range(n)``."""
    if batch_size <= 0:
        raise InvalidArgument("batch_size must be positive")
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]
