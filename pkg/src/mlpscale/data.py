"""Datasets, preprocessing and the augmentation / target pipeline."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensor import make_rng

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
MLDS_MAGIC = b"MLDS"
MLDS_VERSION = 1


class DataFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # N x h x w x c, uint8
    labels: np.ndarray  # N, int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValueError(f"images must be uint8 N x h x w x c, got {self.images.dtype} {self.images.shape}")
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if self.labels.shape != (len(self.images),):
            raise ValueError("labels must be a vector with one entry per image")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        return replace(self, images=self.images[index], labels=self.labels[index])


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    crop_padding: int = 4
    mixup: float = 0.0
    label_smoothing: float = 0.3

    def __post_init__(self):
        if self.crop_padding < 0:
            raise ValueError("crop_padding must be >= 0")
        if self.mixup < 0:
            raise ValueError("mixup strength must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")


# ---------------------------------------------------------------------------
# file formats


def _cifar_files(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("data_batch_*.bin"))
        if not files:
            raise FileNotFoundError(f"no data_batch_*.bin files under {path}")
        return files
    return [path]


def load_cifar10_binary(path, split: str = "train") -> Dataset:
    """Read CIFAR-10 binary batches (a file, a list of files, or a directory of training batches).

    Each record is one label byte followed by 3072 channel-major pixel bytes.
    """
    files = [Path(p) for p in path] if isinstance(path, (list, tuple)) else _cifar_files(path)
    images, labels = [], []
    for f in files:
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD:
            offset = (raw.size // CIFAR_RECORD) * CIFAR_RECORD
            raise DataFormatError(f"{f}: truncated CIFAR-10 record", offset)
        rec = raw.reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(rec[:, 0] >= 10)
        if bad.size:
            raise DataFormatError(f"{f}: label {rec[bad[0], 0]} out of range", int(bad[0]) * CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        chw = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
        images.append(np.ascontiguousarray(chw.transpose(0, 2, 3, 1)))
    return Dataset(np.concatenate(images), np.concatenate(labels), 10, split)


def load_cifar10_dir(root) -> tuple[Dataset, Dataset]:
    """Train and test splits from an extracted ``cifar-10-batches-bin`` directory."""
    root = Path(root)
    return load_cifar10_binary(root, "train"), load_cifar10_binary(root / "test_batch.bin", "test")


def save_mlds(dataset: Dataset, path) -> None:
    """Write the native container: 'MLDS', then version, N, h, w, c, K as LE int32."""
    n, h, w, c = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(MLDS_MAGIC)
        fh.write(struct.pack("<6i", MLDS_VERSION, n, h, w, c, dataset.num_classes))
        fh.write(np.ascontiguousarray(dataset.images).tobytes())
        fh.write(dataset.labels.astype("<i4").tobytes())


def load_mlds(path, split: str = "train") -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 28:
        raise DataFormatError("truncated MLDS header", len(raw))
    if raw[:4] != MLDS_MAGIC:
        raise DataFormatError("bad MLDS magic", 0)
    version, n, h, w, c, k = struct.unpack_from("<6i", raw, 4)
    if version != MLDS_VERSION:
        raise DataFormatError(f"unsupported MLDS version {version}", 4)
    if min(n, h, w, c) < 1 or k < 1:
        raise DataFormatError("non-positive extent in MLDS header", 8)
    n_pix = n * h * w * c
    need = 28 + n_pix + 4 * n
    if len(raw) < need:
        raise DataFormatError("truncated MLDS payload", len(raw))
    images = np.frombuffer(raw, np.uint8, n_pix, 28).reshape(n, h, w, c).copy()
    labels = np.frombuffer(raw, "<i4", n, 28 + n_pix).astype(np.int64)
    if labels.min() < 0 or labels.max() >= k:
        bad = int(np.flatnonzero((labels < 0) | (labels >= k))[0])
        raise DataFormatError("label out of range", 28 + n_pix + 4 * bad)
    return Dataset(images, labels, k, split)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a class-conditional synthetic image set.

    ``bright_pixel``: dim noise background plus one saturated pixel whose
    location encodes the class (linearly separable).
    ``prototype``: each class has a fixed random template (drawn from
    ``task_seed``); samples blend it with fresh noise, ``noise`` in [0, 1]
    controlling difficulty.
    """

    n: int = 1000
    h: int = 8
    w: int = 8
    c: int = 3
    num_classes: int = 10
    pattern: str = "bright_pixel"
    noise: float = 0.5
    task_seed: int = 0
    balanced: bool = True

    def __post_init__(self):
        if self.pattern not in ("bright_pixel", "prototype"):
            raise ValueError(f"unknown synthetic pattern {self.pattern!r}")
        if min(self.n, self.h, self.w, self.c) < 1 or self.num_classes < 2:
            raise ValueError("synthetic extents must be positive and num_classes >= 2")
        if self.pattern == "bright_pixel" and self.num_classes > self.h * self.w:
            raise ValueError("bright_pixel needs at least one pixel location per class")


def _class_locations(spec: SynthSpec) -> np.ndarray:
    hw = spec.h * spec.w
    return (np.arange(spec.num_classes) * hw) // spec.num_classes


def synth_dataset(spec: SynthSpec, seed: int, split: str = "train") -> Dataset:
    if spec.num_classes > spec.n:
        raise ValueError(f"num_classes ({spec.num_classes}) exceeds the number of examples ({spec.n})")
    rng = make_rng(seed)
    if spec.balanced:
        labels = rng.permutation(np.arange(spec.n) % spec.num_classes)
    else:
        labels = rng.integers(0, spec.num_classes, spec.n)
    shape = (spec.n, spec.h, spec.w, spec.c)
    if spec.pattern == "bright_pixel":
        images = rng.integers(0, 64, shape, dtype=np.uint8)
        loc = _class_locations(spec)[labels]
        rows, cols = np.divmod(loc, spec.w)
        images[np.arange(spec.n), rows, cols, :] = 255
    else:
        protos = make_rng(spec.task_seed, 1).random((spec.num_classes, spec.h, spec.w, spec.c))
        noise = rng.random(shape)
        mix = (1.0 - spec.noise) * protos[labels] + spec.noise * noise
        images = np.clip(np.rint(mix * 255.0), 0, 255).astype(np.uint8)
    return Dataset(images, labels, spec.num_classes, split)


def class_proportional_subsample(dataset: Dataset, fraction: float, rng: np.random.Generator) -> Dataset:
    """Keep ``round(fraction * n_k)`` examples of every class k (at least one)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    keep = []
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == k)
        if idx.size == 0:
            continue
        n_keep = max(1, int(round(fraction * idx.size)))
        keep.append(rng.choice(idx, n_keep, replace=False))
    return dataset.subset(np.sort(np.concatenate(keep)))


# ---------------------------------------------------------------------------
# preprocessing


def channel_stats(images) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of ``pixel / 255`` over a whole split.

    Sums are taken in exact integer arithmetic, so a constant channel gets a
    standard deviation of exactly zero.
    """
    x = np.asarray(images)
    x = x.reshape(-1, x.shape[-1])
    n = x.shape[0]
    levels = np.arange(256, dtype=np.int64)
    hists = [np.bincount(x[:, c], minlength=256).astype(np.int64) for c in range(x.shape[1])]
    s1 = [int(h @ levels) for h in hists]
    s2 = [int(h @ (levels * levels)) for h in hists]
    mean = np.array([a / (255.0 * n) for a in s1])
    var = np.array([(n * b - a * a) / (255.0 * 255.0 * n * n) for a, b in zip(s1, s2)])
    return mean, np.sqrt(var)


def normalize(images, mean, std, dtype=np.float32) -> np.ndarray:
    """``(pixel / 255 - mean) / std`` per channel."""
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError(f"cannot normalise: zero standard deviation in channel(s) {np.flatnonzero(std <= 0).tolist()}")
    x = (np.asarray(images, dtype=np.float64) / 255.0 - mean) / std
    return x.astype(dtype)


def denormalize(x, mean, std) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) * std + mean) * 255.0


def resize_bilinear(image, side: int) -> np.ndarray:
    """Corner-aligned separable bilinear resize of an h x w x c image to side x side."""
    if side < 1:
        raise ValueError("target side must be >= 1")
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]

    def axis_weights(n_in):
        if side == 1 or n_in == 1:
            pos = np.full(side, (n_in - 1) / 2.0)
        else:
            pos = np.arange(side) * (n_in - 1) / (side - 1)
        lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    lo, hi, t = axis_weights(img.shape[0])
    rows = img[lo] * (1 - t)[:, None, None] + img[hi] * t[:, None, None]
    lo, hi, t = axis_weights(img.shape[1])
    out = rows[:, lo] * (1 - t)[None, :, None] + rows[:, hi] * t[None, :, None]
    return out[..., 0] if squeeze else out


def resize_dataset(dataset: Dataset, side: int) -> Dataset:
    if dataset.image_shape[:2] == (side, side):
        return dataset
    out = np.empty((len(dataset), side, side, dataset.image_shape[2]), dtype=np.uint8)
    for i, img in enumerate(dataset.images):
        out[i] = np.clip(np.rint(resize_bilinear(img, side)), 0, 255)
    return replace(dataset, images=out)


# ---------------------------------------------------------------------------
# augmentation


def draw_flip_crop(n: int, pad: int, rng: np.random.Generator):
    """Per-example (flip, dy, dx) draws; offsets uniform on {0..2*pad}."""
    flips = rng.random(n) < 0.5
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    return flips, offs[:, 0], offs[:, 1]


def apply_flip_crop(images, pad: int, flips, dys, dxs) -> np.ndarray:
    images = np.asarray(images)
    n, h, w, _ = images.shape
    if pad:
        padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    else:
        padded = images
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, dys[i]:dys[i] + h, dxs[i]:dxs[i] + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


def random_flip_crop(image, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip with probability 1/2, then a random crop of the zero-padded image."""
    if pad < 0:
        raise ValueError("pad must be >= 0")
    flips, dys, dxs = draw_flip_crop(1, pad, rng)
    return apply_flip_crop(np.asarray(image)[None], pad, flips, dys, dxs)[0]


def smooth_labels(labels, alpha: float, num_classes: int) -> np.ndarray:
    """``(1 - alpha) * onehot + alpha / K``."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("label smoothing must lie in [0, 1)")
    labels = np.asarray(labels)
    out = np.full((len(labels), num_classes), alpha / num_classes)
    out[np.arange(len(labels)), labels] += 1.0 - alpha
    return out


def mixup(images, targets, alpha: float, rng: np.random.Generator, lam: float | None = None):
    """Blend every example with a random partner using one Beta(alpha, alpha) weight per batch.

    Returns ``(images, targets, lam, perm)``. Pass ``lam`` to fix the weight.
    """
    images = np.asarray(images)
    targets = np.asarray(targets)
    if len(images) < 2:
        raise ValueError("mixup needs a batch of at least two examples")
    if lam is None:
        if not alpha > 0:
            raise ValueError("mixup strength must be positive")
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(len(images))
    mixed_x = lam * images + (1.0 - lam) * images[perm]
    mixed_y = lam * targets + (1.0 - lam) * targets[perm]
    return mixed_x.astype(images.dtype, copy=False), mixed_y, lam, perm


@dataclass
class BatchPipeline:
    """Turns dataset indices into (inputs, targets) for one training step.

    Order: flip/crop on raw pixels, normalise, smooth labels, then MixUp.
    """

    augment: AugmentConfig
    mean: np.ndarray
    std: np.ndarray
    num_classes: int
    dtype: type = np.float32

    def __call__(self, dataset: Dataset, index, rng: np.random.Generator):
        imgs = dataset.images[index]
        aug = self.augment
        if aug.flip or aug.crop_padding:
            flips, dys, dxs = draw_flip_crop(len(imgs), aug.crop_padding, rng)
            if not aug.flip:
                flips[:] = False
            imgs = apply_flip_crop(imgs, aug.crop_padding, flips, dys, dxs)
        x = normalize(imgs, self.mean, self.std, self.dtype).reshape(len(imgs), -1)
        y = smooth_labels(dataset.labels[index], aug.label_smoothing, self.num_classes)
        if aug.mixup > 0 and len(x) >= 2:
            x, y, _, _ = mixup(x, y, aug.mixup, rng)
        return x, y.astype(self.dtype)

