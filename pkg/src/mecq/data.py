"""Dataset loading and preprocessing.

All datasets are immutable array pairs (x, y). Images are float CHW,
standardized channel-wise; the standardization constants live in the run
config so synthetic and image data share one pipeline. A synthetic blob
generator stands in for image corpora at desk scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ValidationError

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = False
    hflip_prob: float = 0.5
    translate_pad: int = 4

    def __post_init__(self):
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise ValidationError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if self.translate_pad < 0:
            raise ValidationError(f"translate_pad must be >= 0, got {self.translate_pad}")


@dataclass
class Dataset:
    x: np.ndarray  # (N, ...) float32
    y: np.ndarray  # (N,) int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValidationError(
                f"sample/label count mismatch: {self.x.shape[0]} vs {self.y.shape[0]}"
            )
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise ValidationError(f"labels outside [0, {self.classes})")

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i):
        return self.x[i], self.y[i]

    def take(self, indices, split=None) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.x[idx], self.y[idx], self.classes, split or self.split)


def load_cifar10(path, split: str = "train", mean=CIFAR10_MEAN, std=CIFAR10_STD) -> Dataset:
    """Read binary batches of 3073-byte records (label byte + CHW pixels).

    `path` may be a directory holding the usual batch files or a single
    .bin file. Pixels are scaled to [0, 1] then standardized per channel.
    """
    p = Path(path)
    if p.is_dir():
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        files = [p / n for n in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise DataError(f"missing dataset files: {', '.join(missing)}")
    else:
        if not p.exists():
            raise DataError(f"no such file: {p}")
        files = [p]

    images, labels = [], []
    for f in files:
        raw = f.read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
            raise DataError(f"{f}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0]
        if lab.max(initial=0) > 9:
            raise DataError(f"{f}: label byte {int(lab.max())} out of range")
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
        labels.append(lab)

    x = np.concatenate(images).astype(np.float32) / 255.0
    mean = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
    x = (x - mean) / std
    y = np.concatenate(labels).astype(np.int64)
    return Dataset(x, y, classes=10, split=split)


def write_cifar10(path, images: np.ndarray, labels) -> None:
    """Serialize uint8 (N, 3, 32, 32) images back to the binary record format."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or images.shape[1:] != (3, 32, 32):
        raise ValidationError(f"expected uint8 (N, 3, 32, 32) images, got {images.dtype} {images.shape}")
    rec = np.empty((images.shape[0], CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images.reshape(images.shape[0], -1)
    Path(path).write_bytes(rec.tobytes())


def load_csv(path, classes: int | None = None, split: str = "train") -> Dataset:
    """Feature vectors from a CSV with header `label,f0,f1,...`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0].strip() != "label":
            raise DataError(f"{path}: first column must be 'label', got {header[:1]}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")
    try:
        y = np.array([int(r[0]) for r in rows], dtype=np.int64)
        x = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float32)
    except (ValueError, IndexError) as e:
        raise DataError(f"{path}: malformed row: {e}") from None
    if x.shape[1] != len(header) - 1:
        raise DataError(f"{path}: row width does not match header")
    return Dataset(x, y, classes=classes or int(y.max()) + 1, split=split)


def synth_blobs(
    classes: int,
    per_class: int,
    dim: int,
    sep: float,
    seed: int,
    image_shape: tuple | None = None,
) -> Dataset:
    """Gaussian clusters with unit covariance at random unit-sphere centers
    scaled by sep. image_shape reshapes each vector (product must be dim),
    which lets conv models consume blob data."""
    if classes < 2:
        raise ValidationError(f"need at least 2 classes, got {classes}")
    if per_class < 1 or dim < 1:
        raise ValidationError("per_class and dim must be >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= sep
    y = np.repeat(np.arange(classes), per_class)
    x = centers[y] + rng.normal(size=(classes * per_class, dim))
    order = rng.permutation(len(y))
    x, y = x[order].astype(np.float32), y[order]
    if image_shape is not None:
        image_shape = tuple(int(s) for s in image_shape)
        if int(np.prod(image_shape)) != dim:
            raise ValidationError(f"image_shape {image_shape} does not hold {dim} values")
        x = x.reshape(len(y), *image_shape)
    return Dataset(x, y, classes=classes, split="train")


def _stratified_indices(y: np.ndarray, n: int, classes: int, rng) -> np.ndarray:
    """n indices spread as evenly over classes as the data allows."""
    per = [np.flatnonzero(y == c) for c in range(classes)]
    for idx in per:
        rng.shuffle(idx)
    want = n // classes
    picked = [idx[: min(want, len(idx))] for idx in per]
    chosen = np.concatenate([p for p in picked if p.size]) if any(p.size for p in picked) else np.array([], dtype=int)
    if chosen.size < n:
        # fill from whatever is left, class-agnostic
        leftover = np.setdiff1d(np.arange(y.size), chosen, assume_unique=False)
        rng.shuffle(leftover)
        chosen = np.concatenate([chosen, leftover[: n - chosen.size]])
    return np.sort(chosen[:n])


def calibration_subset(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """Class-stratified sample without replacement, for range calibration."""
    if n < 1 or n > len(ds):
        raise ValidationError(f"calibration size {n} not in [1, {len(ds)}]")
    rng = np.random.default_rng(seed)
    idx = _stratified_indices(ds.y, n, ds.classes, rng)
    return ds.take(idx, split="calib")


def split_dataset(ds: Dataset, val_fraction: float, seed: int = 0):
    """Stratified train/val split."""
    if not (0.0 < val_fraction < 1.0):
        raise ValidationError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n_val = max(1, int(round(val_fraction * len(ds))))
    rng = np.random.default_rng(seed)
    val_idx = _stratified_indices(ds.y, n_val, ds.classes, rng)
    mask = np.ones(len(ds), dtype=bool)
    mask[val_idx] = False
    return ds.take(np.flatnonzero(mask), split="train"), ds.take(val_idx, split="val")


def augment(sample: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    """Random horizontal flip plus reflect-pad-and-crop translation of one
    CHW image. Identity when disabled."""
    if not cfg.enabled:
        return sample
    if sample.ndim != 3:
        raise ValidationError(f"augment expects a CHW image, got shape {sample.shape}")
    _, h, w = sample.shape
    t = cfg.translate_pad
    if t >= h or t >= w:
        raise ValidationError(f"translate_pad {t} too large for {h}x{w} image")
    out = sample
    if rng.random() < cfg.hflip_prob:
        out = out[:, :, ::-1]
    if t > 0:
        padded = np.pad(out, ((0, 0), (t, t), (t, t)), mode="reflect")
        oy, ox = rng.integers(0, 2 * t + 1, size=2)
        out = padded[:, oy : oy + h, ox : ox + w]
    return np.ascontiguousarray(out)
