"""Dataset ingestion, deterministic subsetting, resizing, batching.

Two resize paths are deliberately kept apart: a naive bilinear sampler
(no prefilter, prone to aliasing when shrinking a lot) and an anti-aliased
separable cubic resampler whose filter support widens with the shrink
factor. Both use half-pixel-centered source coordinates and are exactly
mean-preserving on constant images.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


def worker_count() -> int:
    """Parallelism cap for per-image work, from SSD_NUM_THREADS if set."""
    env = os.environ.get("SSD_NUM_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"SSD_NUM_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise ConfigError("SSD_NUM_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


@dataclass
class ImageRecord:
    path: Path
    _pixels: np.ndarray | None = field(default=None, repr=False)

    def pixels(self) -> np.ndarray:
        """8-bit RGB array (H, W, 3); decoded lazily, cached."""
        if self._pixels is None:
            with Image.open(self.path) as img:
                self._pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
        return self._pixels


@dataclass
class DatasetSplit:
    train: list
    val: list
    fraction_applied: int = 100


def _scan_dir(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"not a directory: {directory}")
    records = []
    skipped = 0
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        try:
            with Image.open(path) as img:
                img.verify()
        except Exception as exc:
            skipped += 1
            logger.warning("skipping unreadable image %s: %s", path, exc)
            continue
        records.append(ImageRecord(path))
    if not records:
        raise ConfigError(f"no decodable images in {directory}")
    if skipped:
        logger.warning("%s: skipped %d unreadable file(s)", directory, skipped)
    return records


def load_dataset(train_dir, val_dir) -> DatasetSplit:
    """Lexicographically ordered records from the two split directories."""
    train = _scan_dir(train_dir)
    val = _scan_dir(val_dir)
    logger.info("loaded %d train / %d val records", len(train), len(val))
    return DatasetSplit(train=train, val=val)


def subset_fraction(split: DatasetSplit, k_percent: int, seed: int) -> DatasetSplit:
    """Seeded prefix subset of the training list; smaller K nests in larger K."""
    if k_percent not in (25, 50, 75, 100):
        raise ConfigError(f"data fraction must be 25/50/75/100, got {k_percent}")
    n = len(split.train)
    keep = math.ceil(k_percent * n / 100)
    perm = np.random.default_rng(seed).permutation(n)
    train = [split.train[i] for i in perm[:keep]]
    return DatasetSplit(train=train, val=split.val, fraction_applied=k_percent)


# ---------------------------------------------------------------------------
# Resizing
# ---------------------------------------------------------------------------

def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centers."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = math.floor(src)
        frac = src - lo
        for tap, weight in ((lo, 1.0 - frac), (lo + 1, frac)):
            if weight > 0:
                m[i, min(max(tap, 0), n_in - 1)] += weight
    return m


def _cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic interpolation kernel, support [-2, 2]."""
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = (a + 2) * x[near] ** 3 - (a + 3) * x[near] ** 2 + 1
    out[far] = a * x[far] ** 3 - 5 * a * x[far] ** 2 + 8 * a * x[far] - 4 * a
    return out


def _cubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Anti-aliased cubic resampling matrix.

    When shrinking, the kernel is dilated by the scale factor so its support
    covers every source sample that maps into the output pixel's footprint.
    """
    scale = n_in / n_out
    width = max(scale, 1.0)
    support = 2.0 * width
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = math.floor(src - support) + 1
        hi = math.floor(src + support)
        taps = np.arange(lo, hi + 1)
        weights = _cubic_kernel((taps - src) / width)
        taps = np.clip(taps, 0, n_in - 1)
        np.add.at(m[i], taps, weights)
        m[i] /= m[i].sum()
    return m


def _separable_resize(img: np.ndarray, m_h: np.ndarray, m_w: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    tmp = np.tensordot(m_h, img, axes=(1, 0))          # (out_h, W, C)
    return np.tensordot(tmp, m_w, axes=(1, 1)).transpose(0, 2, 1)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Naive separable bilinear resize (no anti-aliasing prefilter)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    h, w = img.shape[:2]
    return _separable_resize(img, _bilinear_matrix(h, out_h), _bilinear_matrix(w, out_w))


def resize_antialiased(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Clean separable cubic resize; filter support scales with the shrink."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    h, w = img.shape[:2]
    return _separable_resize(img, _cubic_matrix(h, out_h), _cubic_matrix(w, out_w))


def normalize_to_tanh_range(img: np.ndarray) -> np.ndarray:
    """8-bit (H,W,3) RGB -> float32 (3,H,W) in [-1, 1]."""
    arr = np.asarray(img, dtype=np.float32)
    return (arr / 127.5 - 1.0).transpose(2, 0, 1)


def denormalize_to_uint8(images: np.ndarray) -> np.ndarray:
    """Inverse map: [-1,1] (..,3,H,W) -> 8-bit (..,H,W,3)."""
    arr = np.round(127.5 * (np.asarray(images, dtype=np.float64) + 1.0))
    arr = np.clip(arr, 0, 255).astype(np.uint8)
    return np.moveaxis(arr, -3, -1)


def prepare_training_tensor(records, size=64, resize=resize_bilinear) -> np.ndarray:
    """Decode, resize and normalize records into one (N,3,size,size) tensor."""
    def one(record):
        resized = np.clip(resize(record.pixels(), size, size), 0, 255)
        return normalize_to_tanh_range(resized)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        tensors = list(pool.map(one, records))
    return np.stack(tensors).astype(np.float32)


def make_batches(n_items: int, batch_size: int, seed: int, epoch: int) -> list:
    """Seeded per-epoch shuffle, split into full batches (partial dropped)."""
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2")
    perm = np.random.default_rng(seed ^ epoch).permutation(n_items)
    n_batches = n_items // batch_size
    return [perm[i * batch_size : (i + 1) * batch_size] for i in range(n_batches)]
