"""Synthetic per-task image sets, an IDX-like binary format, and stratified splits.

Two synthetic concepts stand in for differently-annotated datasets over the
same input domain: ``blob`` positives contain a bright Gaussian spot,
``ring`` positives a bright annulus. Negatives are background plus noise.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

TASK_KINDS = ("blob", "ring")
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
BACKGROUND = 0.3


@dataclass(frozen=True)
class LabeledImageSet:
    images: np.ndarray  # N x 1 x H x W, float32 in [0, 1]
    labels: np.ndarray  # N, uint8 in {0, 1}
    task_name: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DomainError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DomainError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DomainError("pixel values must lie in [0, 1]")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DomainError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx], self.task_name)


@dataclass(frozen=True)
class DatasetSplit:
    train: LabeledImageSet
    validation: LabeledImageSet
    train_idx: np.ndarray
    validation_idx: np.ndarray
    split_seed: int
    validation_fraction: float


def _blob(hw: int, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    sigma = hw / 10.0
    margin = max(1, int(round(sigma)))
    cy, cx = rng.uniform(margin, hw - 1 - margin, size=2)
    yy, xx = np.mgrid[0:hw, 0:hw]
    return amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))


def _ring(hw: int, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    radius = hw / 4.0
    width = hw / 20.0
    lo, hi = radius + 1, hw - 2 - radius
    cy, cx = rng.uniform(lo, hi, size=2)
    yy, xx = np.mgrid[0:hw, 0:hw]
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return amplitude * np.exp(-((r - radius) ** 2) / (2 * width ** 2))


_SHAPES = {"blob": _blob, "ring": _ring}


def gen_synthetic_task(task_kind: str, n: int, hw: int, positive_rate: float,
                       noise_sigma: float, seed: int, amplitude: float = 0.5,
                       task_name: str | None = None) -> LabeledImageSet:
    if task_kind not in TASK_KINDS:
        raise DomainError(f"unknown task kind {task_kind!r}; expected one of {TASK_KINDS}")
    if not 0 < positive_rate < 1:
        raise DomainError(f"positive_rate must lie in (0, 1), got {positive_rate}")
    if hw < 8 or hw % 8:
        raise DomainError(f"hw must be a positive multiple of 8, got {hw}")
    if n < 1 or noise_sigma < 0:
        raise DomainError("n must be positive and noise_sigma nonnegative")
    rng = np.random.default_rng(seed)
    labels = (rng.random(n) < positive_rate).astype(np.uint8)
    images = np.full((n, 1, hw, hw), BACKGROUND, dtype=np.float64)
    if noise_sigma > 0:
        images += rng.normal(0.0, noise_sigma, size=images.shape)
    draw = _SHAPES[task_kind]
    for i in np.flatnonzero(labels):
        images[i, 0] += draw(hw, rng, amplitude)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return LabeledImageSet(images, labels, task_name or task_kind)


def split(dataset: LabeledImageSet, fraction: float = 0.2, seed: int = 0) -> DatasetSplit:
    """Stratified train/validation split; validation size is round(fraction * N).

    Per-class validation counts use largest-remainder allocation, so each
    class gets floor or ceil of fraction * class size.
    """
    n = len(dataset)
    if not 0 < fraction < 1:
        raise DomainError(f"fraction must lie in (0, 1), got {fraction}")
    if n < 2:
        raise DomainError("need at least 2 samples to split")
    rng = np.random.default_rng(seed)
    n_val = int(round(fraction * n))
    classes = [np.flatnonzero(dataset.labels == c) for c in (0, 1)]
    if min(len(c) for c in classes) < 2:
        warnings.warn("a class has fewer than 2 samples; falling back to unstratified split",
                      stacklevel=2)
        val = rng.permutation(n)[:n_val]
    else:
        quotas = [fraction * len(c) for c in classes]
        counts = [int(np.floor(q)) for q in quotas]
        remainders = np.array([q - c for q, c in zip(quotas, counts)])
        order = np.lexsort((rng.random(2), -remainders))
        for k in order[: n_val - sum(counts)]:
            counts[k] += 1
        val = np.concatenate([rng.permutation(c)[:k] for c, k in zip(classes, counts)])
    val = np.sort(val)
    mask = np.ones(n, dtype=bool)
    mask[val] = False
    train = np.flatnonzero(mask)
    return DatasetSplit(dataset.subset(train), dataset.subset(val), train, val, seed, fraction)


# -- IDX-like files ----------------------------------------------------------
# images: magic u32 | count u32 | H u32 | W u32 | count*H*W bytes
# labels: magic u32 | count u32 | count bytes
# Integers are big-endian, as in the IDX format.

def write_idx_like(dataset: LabeledImageSet, path_images, path_labels) -> None:
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DomainError("IDX-like files hold single-channel images only")
    pixels = np.floor(dataset.images[:, 0] * 255.0 + 0.5).astype(np.uint8)
    Path(path_images).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(path_labels).write_bytes(struct.pack(">II", LABELS_MAGIC, n)
                                  + dataset.labels.astype(np.uint8).tobytes())


def load_idx_like(path_images, path_labels, task_name: str | None = None) -> LabeledImageSet:
    raw = Path(path_images).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path_images}: truncated header", offset=len(raw))
    magic, n, h, w = struct.unpack_from(">IIII", raw, 0)
    if magic != IMAGES_MAGIC:
        raise FormatError(f"{path_images}: bad magic 0x{magic:08x}", offset=0)
    need = 16 + n * h * w
    if len(raw) < need:
        raise FormatError(f"{path_images}: truncated pixel data, expected {need} bytes", offset=len(raw))
    if len(raw) > need:
        raise FormatError(f"{path_images}: {len(raw) - need} trailing bytes", offset=need)

    lraw = Path(path_labels).read_bytes()
    if len(lraw) < 8:
        raise FormatError(f"{path_labels}: truncated header", offset=len(lraw))
    lmagic, ln = struct.unpack_from(">II", lraw, 0)
    if lmagic != LABELS_MAGIC:
        raise FormatError(f"{path_labels}: bad magic 0x{lmagic:08x}", offset=0)
    if ln != n:
        raise FormatError(f"label count {ln} disagrees with image count {n}", offset=4)
    if len(lraw) != 8 + ln:
        off = min(len(lraw), 8 + ln)
        raise FormatError(f"{path_labels}: expected {8 + ln} bytes, got {len(lraw)}", offset=off)
    labels = np.frombuffer(lraw, dtype=np.uint8, offset=8).copy()
    bad = np.flatnonzero(labels > 1)
    if bad.size:
        raise FormatError(f"{path_labels}: label value {labels[bad[0]]} not in {{0, 1}}",
                          offset=8 + int(bad[0]))
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, h, w)
    images = (pixels.astype(np.float32) / np.float32(255.0))
    return LabeledImageSet(images, labels, task_name or Path(path_images).stem)
