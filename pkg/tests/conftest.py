import numpy as np
import pytest
from PIL import Image

from ssdgan.data import resize_bilinear


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def numeric_grad(f, arr, eps=1e-6):
    """Central-difference gradient of scalar f with respect to arr, in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def synth_images(n, size=64, seed=0, cells=8):
    """Deterministic smooth color-blob images in [-1,1], (n,3,size,size)."""
    rng = np.random.default_rng(seed)
    coarse = rng.standard_normal((n, cells, cells, 3))
    out = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        up = resize_bilinear(coarse[i], size, size)  # (size,size,3)
        out[i] = np.clip(0.6 * up, -1, 1).transpose(2, 0, 1)
    return out


def write_image_dir(path, images_uint8):
    """Save (n,H,W,3) uint8 arrays as img_000.png ... under path."""
    path.mkdir(parents=True, exist_ok=True)
    for i, arr in enumerate(images_uint8):
        Image.fromarray(arr).save(path / f"img_{i:03d}.png")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
