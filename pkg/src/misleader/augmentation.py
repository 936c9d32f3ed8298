"""Stochastic transforms that simulate attacker queries from the defender's data.

Image pipeline (fixed order): random resized crop -> horizontal flip -> random
affine -> brightness/contrast/saturation jitter -> random grayscale, clamped to
[0, 1]. Vector data gets a low-dimensional analogue: planar rotation, per-axis
sign flips, global scaling and additive Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .data import Dataset
from .errors import InvalidArgument, ShapeMismatch

MODES = ("image", "vector", "identity")


@dataclass(frozen=True)
class AugmentationPolicy:
    mode: str = "vector"
    # image
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    crop_ratio_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    flip_prob: float = 0.5
    rotate_deg: float = 15.0
    translate_frac: float = 0.1
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.1
    # vector
    vector_rotate_deg: float = 20.0
    noise_std: float | None = None  # absolute; None means noise_rel x per-dimension data std
    noise_rel: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)
    axis_flip_prob: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"unknown augmentation mode {self.mode!r}")
        for name in ("flip_prob", "grayscale_prob", "axis_flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidArgument(f"{name} must lie in [0, 1]")
        for name in ("crop_scale_range", "crop_ratio_range", "scale_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise InvalidArgument(f"{name} must be an ordered finite pair")
        if not 0.0 < self.crop_scale_range[0] or self.crop_scale_range[1] > 1.0:
            raise InvalidArgument("crop_scale_range must lie in (0, 1]")
        if self.crop_ratio_range[0] <= 0:
            raise InvalidArgument("crop_ratio_range must be positive")
        magnitudes = [self.rotate_deg, self.translate_frac, self.jitter_strength,
                      self.vector_rotate_deg, self.noise_rel]
        if self.noise_std is not None:
            magnitudes.append(self.noise_std)
        if any(not math.isfinite(m) or m < 0 for m in magnitudes):
            raise InvalidArgument("transform magnitudes must be finite and non-negative")
        if self.jitter_strength > 1.0:
            raise InvalidArgument("jitter_strength must be at most 1")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(mode="identity")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "AugmentationPolicy":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in dict(d).items()})


def example_rng(seed: int, index: int, copy: int) -> np.random.Generator:
    """Independent stream per (seed, example, copy)."""
    return np.random.default_rng([int(seed), int(index), int(copy)])


# -- image transforms ----------------------------------------------------------


def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1].copy()


def _grayscale(x: np.ndarray) -> np.ndarray:
    if x.shape[0] == 3:
        return (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2])[None]
    return x.mean(axis=0, keepdims=True)


def _resample(x: np.ndarray, matrix: np.ndarray, offset: np.ndarray, mode: str) -> np.ndarray:
    # matrix/offset map output (row, col) coordinates to input coordinates
    return np.stack([
        ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode=mode, cval=0.0)
        for ch in x
    ])


def _random_resized_crop(x, policy, rng):
    _, h, w = x.shape
    area = h * w
    for _ in range(10):
        scale = rng.uniform(*policy.crop_scale_range)
        log_lo, log_hi = np.log(policy.crop_ratio_range)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(scale * area * ratio)))
        ch = int(round(math.sqrt(scale * area / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            break
    else:
        ch, cw = h, w
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    if (ch, cw) == (h, w):
        return x
    # bilinear resize of the crop back to h x w (pixel-centre alignment)
    sy, sx = ch / h, cw / w
    matrix = np.diag([sy, sx])
    offset = np.array([top + 0.5 * sy - 0.5, left + 0.5 * sx - 0.5])
    return _resample(x, matrix, offset, mode="nearest")


def _random_affine(x, policy, rng):
    _, h, w = x.shape
    angle = math.radians(rng.uniform(-policy.rotate_deg, policy.rotate_deg))
    ty = rng.uniform(-policy.translate_frac, policy.translate_frac) * h
    tx = rng.uniform(-policy.translate_frac, policy.translate_frac) * w
    if angle == 0.0 and ty == 0.0 and tx == 0.0:
        return x
    c, s = math.cos(angle), math.sin(angle)
    # inverse rotation about the centre, then undo the translation
    matrix = np.array([[c, s], [-s, c]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ (centre + np.array([ty, tx]))
    return _resample(x, matrix, offset, mode="constant")


def _jitter(x, strength, rng):
    b, c, s = rng.uniform(1.0 - strength, 1.0 + strength, size=3)
    if strength == 0.0:
        return x
    x = np.clip(x * b, 0.0, 1.0)
    mean = _grayscale(x).mean()
    x = np.clip((x - mean) * c + mean, 0.0, 1.0)
    if x.shape[0] == 3:
        gray = _grayscale(x)
        x = np.clip((x - gray) * s + gray, 0.0, 1.0)
    return x


def augment_image(x, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeMismatch(f"augment_image expects c x h x w, got {x.shape}")
    if policy.mode == "identity":
        return x.copy()
    if policy.mode != "image":
        raise InvalidArgument("augment_image needs an image-mode policy")
    out = _random_resized_crop(x, policy, rng)
    if rng.random() < policy.flip_prob:
        out = hflip(out)
    out = _random_affine(out, policy, rng)
    out = _jitter(out, policy.jitter_strength, rng)
    if rng.random() < policy.grayscale_prob:
        out = np.broadcast_to(_grayscale(out), out.shape)
    return np.clip(out, 0.0, 1.0).astype(x.dtype, copy=True)


# -- vector transforms ---------------------------------------------------------


def rotate_plane(x: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate the first two coordinates counter-clockwise."""
    out = np.array(x, dtype=np.float64, copy=True)
    if out.shape[-1] < 2 or degrees == 0.0:
        return out
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    a, b = out[..., 0].copy(), out[..., 1].copy()
    out[..., 0] = c * a - s * b
    out[..., 1] = s * a + c * b
    return out


def augment_vector(x, policy: AugmentationPolicy, rng: np.random.Generator,
                   data_std=None) -> np.ndarray:
    """``data_std`` sets the noise scale when ``policy.noise_std`` is None."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 1:
        raise ShapeMismatch(f"augment_vector expects a non-empty 1-D vector, got {x.shape}")
    if policy.mode == "identity":
        return x.copy()
    if policy.mode != "vector":
        raise InvalidArgument("augment_vector needs a vector-mode policy")
    d = x.shape[0]
    angle = rng.uniform(-policy.vector_rotate_deg, policy.vector_rotate_deg)
    flips = rng.random(d) < policy.axis_flip_prob
    scale = rng.uniform(*policy.scale_range)
    noise = rng.standard_normal(d)

    out = rotate_plane(x, angle)
    out = np.where(flips, -out, out)
    out = out * scale
    if policy.noise_std is not None:
        sigma = policy.noise_std
    elif data_std is not None:
        sigma = policy.noise_rel * np.asarray(data_std, dtype=np.float64)
    else:
        sigma = 0.0
    if np.any(sigma):
        out = out + sigma * noise
    return out


def augment_dataset(dataset: Dataset, policy: AugmentationPolicy, seed: int,
                    copies: int = 1) -> Dataset:
    """``copies`` independent transforms of every example, copy-major order."""
    if len(dataset) == 0:
        raise InvalidArgument("cannot augment an empty dataset")
    if copies < 1:
        raise InvalidArgument("copies must be at least 1")
    n = len(dataset)
    name = f"{dataset.name}+aug"
    if policy.mode == "identity":
        return Dataset(np.tile(dataset.inputs, (copies,) + (1,) * (dataset.inputs.ndim - 1)),
                       np.tile(dataset.labels, copies), dataset.num_classes,
                       dataset.name if copies == 1 else name)
    if dataset.image_mode:
        if policy.mode != "image":
            raise InvalidArgument("image data needs an image-mode policy")
        fn = augment_image
        kwargs = {}
    else:
        if policy.mode != "vector":
            raise InvalidArgument("vector data needs a vector-mode policy")
        fn = augment_vector
        kwargs = {"data_std": dataset.inputs.std(axis=0)}
    out = np.empty((n * copies,) + dataset.input_shape, dtype=np.float64 if not dataset.image_mode
                   else dataset.inputs.dtype)
    for c in range(copies):
        for i in range(n):
            out[c * n + i] = fn(dataset.inputs[i], policy, example_rng(seed, i, c), **kwargs)
    return Dataset(out, np.tile(dataset.labels, copies), dataset.num_classes, name)
