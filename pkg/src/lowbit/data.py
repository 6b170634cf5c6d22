"""Dataset ingestion, augmentation, and deterministic batching.

Readers cover the CIFAR-10 binary batch format (3073-byte records) and the
IDX format used by MNIST. A synthetic generator (Gaussian class blobs
rendered as images) keeps property tests and desk experiments free of
dataset downloads. Images live in [0, 1]; the train-split per-pixel mean is
subtracted at batch time, after augmentation and after any input-image
quantization of the "*" variant.
"""

from __future__ import annotations

import glob
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import quant
from .errors import (CorruptFileError, CorruptLabelError, FormatError,
                     InputError, PairingError)

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray             # N x C x H x W float32 in [0, 1]
    labels: np.ndarray             # int64
    split: str
    per_pixel_mean: np.ndarray | None = None   # C x H x W, train-split mean

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def _parse_cifar_bytes(raw, path):
    if len(raw) % CIFAR_RECORD != 0:
        raise CorruptFileError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise CorruptLabelError(f"{path}: label byte {labels.max()} >= 10")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(dir_path, split="train"):
    """Read the standard CIFAR-10 binary batches found under ``dir_path``."""
    if split == "train":
        pattern = "data_batch_*"
    else:
        pattern = "test_batch*"
    files = sorted(glob.glob(os.path.join(dir_path, pattern + ".bin")))
    if not files:
        files = sorted(glob.glob(os.path.join(dir_path, pattern)))
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 {split} batches under {dir_path}")
    images, labels = [], []
    for f in files:
        with open(f, "rb") as fh:
            img, lab = _parse_cifar_bytes(fh.read(), f)
        images.append(img)
        labels.append(lab)
    return Dataset(np.concatenate(images), np.concatenate(labels), split)


def _read_idx_header(fh, expect_magic, path):
    head = fh.read(4)
    if len(head) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", head)[0]
    if magic != expect_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, "
                          f"expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    raw = fh.read(4 * ndim)
    if len(raw) != 4 * ndim:
        raise FormatError(f"{path}: truncated IDX dimension header")
    return struct.unpack(f">{ndim}I", raw)


def load_idx(images_path, labels_path, split="train"):
    """Read an IDX image/label pair (big-endian, magic-checked)."""
    with open(images_path, "rb") as fh:
        n, h, w = _read_idx_header(fh, IDX_IMAGES_MAGIC, images_path)
        raw = fh.read(n * h * w)
        if len(raw) != n * h * w:
            raise FormatError(f"{images_path}: truncated pixel payload")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)
    with open(labels_path, "rb") as fh:
        (nl,) = _read_idx_header(fh, IDX_LABELS_MAGIC, labels_path)
        raw = fh.read(nl)
        if len(raw) != nl:
            raise FormatError(f"{labels_path}: truncated label payload")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n != nl:
        raise PairingError(f"{images_path} has {n} images but "
                           f"{labels_path} has {nl} labels")
    return Dataset(images.astype(np.float32) / 255.0, labels, split)


# -- synthetic data --------------------------------------------------------------

def synthetic_dataset(n_train, n_test, num_classes=10, image_size=32, channels=3,
                      seed=0, noise=0.25, jitter=None):
    """Gaussian class blobs rendered as images.

    Each class owns a fixed set of Gaussian bumps (position, width, per-channel
    amplitude). Samples place the bumps with a random sub-image shift and add
    pixel noise, so translation matters and accuracy saturates below 100%.
    """
    rng = np.random.default_rng(seed)
    if jitter is None:
        jitter = max(image_size // 8, 1)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float32)
    protos = []
    for _ in range(num_classes):
        bumps = []
        for _ in range(3):
            cy, cx = rng.uniform(0.2 * image_size, 0.8 * image_size, size=2)
            sigma = rng.uniform(image_size / 16.0, image_size / 6.5)
            amp = rng.uniform(0.35, 1.0, size=channels)
            bumps.append((cy, cx, sigma, amp))
        protos.append(bumps)

    def render(count, split_rng):
        images = np.empty((count, channels, image_size, image_size), dtype=np.float32)
        labels = split_rng.integers(0, num_classes, size=count)
        for i, lab in enumerate(labels):
            dy, dx = split_rng.integers(-jitter, jitter + 1, size=2)
            img = np.zeros((channels, image_size, image_size), dtype=np.float32)
            for cy, cx, sigma, amp in protos[lab]:
                bump = np.exp(-(((yy - cy - dy) ** 2) + ((xx - cx - dx) ** 2))
                              / (2.0 * sigma * sigma))
                img += amp[:, None, None] * bump[None]
            img += split_rng.normal(0.0, noise, size=img.shape).astype(np.float32)
            images[i] = np.clip(img, 0.0, 1.0)
        return images, labels.astype(np.int64)

    tr_img, tr_lab = render(n_train, rng)
    te_img, te_lab = render(n_test, rng)
    return (Dataset(tr_img, tr_lab, "train"),
            Dataset(te_img, te_lab, "test"))


# -- augmentation and batching ----------------------------------------------------

@dataclass
class AugmentPolicy:
    pad: int = 4
    hflip_prob: float = 0.5


def augment(image, rng, policy):
    """Zero-pad, random-crop back to size, flip with probability 1/2."""
    c, h, w = image.shape
    p = policy.pad
    padded = np.pad(image, ((0, 0), (p, p), (p, p)))
    oy, ox = rng.integers(0, 2 * p + 1, size=2)
    out = padded[:, oy:oy + h, ox:ox + w]
    if rng.random() < policy.hflip_prob:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def attach_mean(train, *others):
    """Compute the per-pixel mean on the train split and attach it everywhere."""
    mean = train.images.mean(axis=0)
    train.per_pixel_mean = mean
    for d in others:
        d.per_pixel_mean = mean
    return mean


@dataclass
class DataBundle:
    """Couples a train/test pair with the batch-preparation policy.

    The emitted batch sequence is a pure function of the generator handed to
    ``train_batches``; the eval pipeline draws no randomness at all.
    """

    train: Dataset
    test: Dataset
    batch_size: int = 64
    augment_train: bool = True
    input_bits: int = 32
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.train.per_pixel_mean is None:
            attach_mean(self.train, self.test)

    @property
    def steps_per_epoch(self):
        return (len(self.train) + self.batch_size - 1) // self.batch_size

    def _finish(self, images):
        if self.input_bits < 32:
            images = quant.quantize_unit(images, self.input_bits)
        return images - self.train.per_pixel_mean[None]

    def train_batches(self, rng):
        """One epoch of shuffled, augmented batches."""
        order = rng.permutation(len(self.train))
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            imgs = self.train.images[idx]
            if self.augment_train:
                imgs = np.stack([augment(im, rng, self.policy) for im in imgs])
            yield self._finish(imgs), self.train.labels[idx]

    def eval_batches(self, split="test"):
        ds = self.test if split == "test" else self.train
        for start in range(0, len(ds), self.batch_size):
            imgs = ds.images[start:start + self.batch_size]
            yield self._finish(imgs), ds.labels[start:start + self.batch_size]
