"""Dataset ingestion (IDX binary), a synthetic desk-scale dataset, and
deterministic batch sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .rng import Rng

__all__ = ["Dataset", "BatchSampler", "load_idx", "write_idx", "synth_blobs"]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray   # [N, C, H, W] float32 in [0,1]
    labels: np.ndarray   # [N] int64
    provenance: str = "unknown"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"image count {self.images.shape[0]} != "
                            f"label count {self.labels.shape[0]}")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.provenance)


def _read_header(f, path, expect_magic, ndims):
    head = f.read(4 * (1 + ndims))
    if len(head) != 4 * (1 + ndims):
        raise DataError(f"{path}: truncated IDX header")
    fields = struct.unpack(f">{1 + ndims}I", head)
    if fields[0] != expect_magic:
        raise DataError(f"{path}: wrong IDX magic {fields[0]:#010x}, "
                        f"expected {expect_magic:#010x}")
    return fields[1:]


def load_idx(images_path, labels_path) -> Dataset:
    """Big-endian IDX pair; bytes scaled by 1/255 into [0,1]."""
    try:
        fi = open(images_path, "rb")
    except OSError as e:
        raise DataError(f"cannot open {images_path}: {e}") from None
    with fi:
        n, h, w = _read_header(fi, images_path, IDX_IMAGES_MAGIC, 3)
        payload = fi.read(n * h * w)
        if len(payload) != n * h * w:
            raise DataError(f"{images_path}: truncated image payload")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, h, w)
    try:
        fl = open(labels_path, "rb")
    except OSError as e:
        raise DataError(f"cannot open {labels_path}: {e}") from None
    with fl:
        (nl,) = _read_header(fl, labels_path, IDX_LABELS_MAGIC, 1)
        payload = fl.read(nl)
        if len(payload) != nl:
            raise DataError(f"{labels_path}: truncated label payload")
        labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    if n != nl:
        raise DataError(f"image count {n} != label count {nl}")
    return Dataset((images.astype(np.float32) / 255.0), labels, "mnist")


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Inverse of load_idx up to 1/255 quantization (round-half-to-even)."""
    imgs = ds.images
    if imgs.min() < 0 or imgs.max() > 1:
        raise DataError("write_idx: pixel values must lie in [0,1]")
    if imgs.shape[1] != 1:
        raise DataError("write_idx: IDX image files are single-channel")
    n, _, h, w = imgs.shape
    quant = np.round(imgs.astype(np.float64) * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w))
        f.write(quant.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def _smooth(field: np.ndarray, passes: int = 3) -> np.ndarray:
    """Cheap box smoothing used to build class templates."""
    out = field
    for _ in range(passes):
        padded = np.pad(out, 1, mode="edge")
        out = sum(padded[1 + dy:1 + dy + field.shape[0], 1 + dx:1 + dx + field.shape[1]]
                  for dy in (-1, 0, 1) for dx in (-1, 0, 1)) / 9.0
    return out


def synth_blobs(n: int, classes: int = 10, image_size: int = 28,
                noise: float = 0.0, seed: int = 0,
                noise_seed: int | None = None,
                class_contrast: float = 1.0,
                template_passes: int = 3,
                binarize: bool = False) -> Dataset:
    """Class-conditional smooth templates plus optional Gaussian pixel noise.

    Linearly separable at noise=0; labels assigned round-robin so the
    histogram is uniform within one sample. Templates depend only on seed;
    noise_seed (default: seed) varies the per-pixel noise so that train and
    test splits can share templates while drawing independent samples.
    class_contrast < 1 blends each class template toward a shared base field,
    shrinking the class signal so corruptions bite harder. template_passes
    controls how much the class fields are smoothed: 0 keeps them at full
    spatial frequency, which makes models trained on clean data noticeably
    more noise-brittle than models trained with noise augmentation. binarize
    thresholds the finished templates to {0.1, 0.9}, giving a high-contrast
    task with wide margins (useful for bounded-attack experiments).
    """
    if classes < 2:
        raise ConfigError("synth_blobs: need at least 2 classes")
    if not 0.0 < class_contrast <= 1.0:
        raise ConfigError("synth_blobs: class_contrast must be in (0, 1]")
    if template_passes < 0:
        raise ConfigError("synth_blobs: template_passes must be >= 0")
    rng = Rng(seed, 0)

    def field(frng, passes):
        raw = frng.uniform(0.0, 1.0, (image_size, image_size), np.float64)
        t = _smooth(raw, passes) if passes else raw
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
        return 0.2 + 0.6 * t              # mid-range values so clipping bites

    base = field(rng.derive("template-base"), 3)
    templates = []
    for c in range(classes):
        t = field(rng.derive("template", c), template_passes)
        templates.append(base + class_contrast * (t - base))
    templates = np.stack(templates)
    if binarize:
        templates = np.where(templates > templates.mean(axis=(1, 2),
                                                        keepdims=True), 0.9, 0.1)
    templates = templates.astype(np.float32)

    labels = np.arange(n, dtype=np.int64) % classes
    images = templates[labels][:, None, :, :].copy()
    if noise > 0:
        nrng = Rng(seed if noise_seed is None else noise_seed, 0).derive("pixel-noise")
        images = np.clip(images + noise * nrng.normal(images.shape, np.float32),
                         0.0, 1.0)
    return Dataset(images, labels, "synthetic")


class BatchSampler:
    """Each epoch is a permutation of all indices, pure in (seed, epoch)."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if batch_size < 1 or n < 1:
            raise ConfigError("BatchSampler: need n >= 1 and batch_size >= 1")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed

    def epoch(self, epoch_idx: int):
        perm = Rng(self.seed, 0).derive("shuffle", epoch_idx).permutation(self.n)
        for start in range(0, self.n, self.batch_size):
            yield perm[start:start + self.batch_size]
