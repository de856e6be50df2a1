"""Generation-fidelity metrics: Fréchet distance and kernel-MMD scores.

The feature extractor is pluggable; the built-in "patch-stats" extractor is
a deterministic 36-d toy used by the test suite so no pretrained network is
required. The numerical core (Gaussian moments, PSD square root, Fréchet
distance, unbiased polynomial-kernel MMD) works for any extractor width.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from . import data as data_mod
from .errors import ConfigError

RESIZE_MODES = ("naive_bilinear", "clean_antialiased")


class FeatureExtractor(Protocol):
    name: str
    dim: int
    input_size: int

    def extract(self, images: np.ndarray) -> np.ndarray:
        """(N, 3, input_size, input_size) in [-1,1] -> (N, dim) features."""
        ...


class PatchStatsExtractor:
    """Toy deterministic extractor: quadrant moments plus global statistics.

    Per channel: mean and biased variance over each cell of a 2x2 spatial
    grid (24 values) plus global mean, variance, min and max (12 values),
    for a 36-d feature row.
    """

    name = "patch-stats"
    dim = 36
    input_size = 64

    def extract(self, images: np.ndarray) -> np.ndarray:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N,3,H,W) images, got {images.shape}")
        n, _, h, w = images.shape
        if h != self.input_size or w != self.input_size:
            raise ValueError(
                f"{self.name} expects {self.input_size}x{self.input_size} input, got {h}x{w}"
            )
        x = images.astype(np.float64)
        hh, hw = h // 2, w // 2
        feats = []
        for qi in (slice(0, hh), slice(hh, h)):
            for qj in (slice(0, hw), slice(hw, w)):
                q = x[:, :, qi, qj]
                feats.append(q.mean(axis=(2, 3)))
                feats.append(q.var(axis=(2, 3)))
        feats.append(x.mean(axis=(2, 3)))
        feats.append(x.var(axis=(2, 3)))
        feats.append(x.min(axis=(2, 3)))
        feats.append(x.max(axis=(2, 3)))
        return np.concatenate(feats, axis=1)


def extract_features(images: np.ndarray, extractor) -> np.ndarray:
    feats = extractor.extract(images)
    if not np.all(np.isfinite(feats)):
        raise ValueError(f"extractor {extractor.name!r} produced non-finite features")
    return feats


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased covariance of feature rows (needs n >= 2)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need a (n>=2, d) feature matrix")
    mu = features.mean(axis=0)
    centered = features - mu
    sigma = centered.T @ centered / (features.shape[0] - 1)
    sigma = 0.5 * (sigma + sigma.T)
    return GaussianStats(mu=mu, sigma=sigma)


def matrix_sqrt_psd(a: np.ndarray, warn_threshold: float = 1e-8) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [-warn_threshold * lambda_max, 0) are clamped silently;
    anything more negative triggers a diagnostics warning before clamping.
    """
    a = np.asarray(a, dtype=np.float64)
    asym = np.max(np.abs(a - a.T))
    if asym > 1e-8 * max(1.0, np.max(np.abs(a))):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    lam_max = max(vals[-1], 0.0)
    if vals[0] < -warn_threshold * max(lam_max, 1.0):
        warnings.warn(
            f"clamping notably negative eigenvalue {vals[0]:.3e} in PSD sqrt",
            RuntimeWarning,
        )
    vals = np.clip(vals, 0.0, None)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return 0.5 * (root + root.T)


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> float:
    """Fréchet distance between two Gaussians, kept in symmetric PSD form."""
    if s1.mu.shape != s2.mu.shape:
        raise ValueError("dimension mismatch between Gaussian statistics")
    diff = s1.mu - s2.mu
    sqrt1 = matrix_sqrt_psd(s1.sigma)
    inner = sqrt1 @ s2.sigma @ sqrt1
    cross = matrix_sqrt_psd(0.5 * (inner + inner.T))
    value = float(diff @ diff + np.trace(s1.sigma) + np.trace(s2.sigma) - 2.0 * np.trace(cross))
    if value < 0:
        if value < -1e-6:
            raise ValueError(f"Fréchet distance is significantly negative: {value}")
        value = 0.0
    return value


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid_mmd(f_real: np.ndarray, f_fake: np.ndarray) -> float:
    """Unbiased squared MMD with the degree-3 polynomial kernel, full-pair."""
    x = np.asarray(f_real, dtype=np.float64)
    y = np.asarray(f_fake, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError("feature matrices must be 2-d with matching width")
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ValueError("unbiased MMD needs at least 2 samples per side")
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


@dataclass
class MetricReport:
    extractor_name: str
    resize_mode: str
    n_real: int
    n_fake: int
    fid: float | None = None
    clean_fid: float | None = None
    kid: float | None = None

    def as_record(self) -> str:
        parts = [
            f"extractor={self.extractor_name}",
            f"resize_mode={self.resize_mode}",
            f"n_real={self.n_real}",
            f"n_fake={self.n_fake}",
        ]
        for key in ("fid", "clean_fid", "kid"):
            value = getattr(self, key)
            if value is not None:
                parts.append(f"{key}={value:.10g}")
        return " ".join(parts)


def _load_side(source, extractor, resize) -> np.ndarray:
    """Image source -> (N, 3, s, s) model-range tensor for the extractor."""
    size = extractor.input_size
    if isinstance(source, (str, Path)):
        records = data_mod._scan_dir(source)
        arrays = [r.pixels() for r in records]
    else:
        arrays = list(source)
    if len(arrays) < 2:
        raise ValueError("need at least 2 usable images per side")
    out = np.stack([
        data_mod.normalize_to_tanh_range(np.clip(resize(a, size, size), 0, 255))
        for a in arrays
    ])
    return out.astype(np.float32)


_RESIZERS = {
    "naive_bilinear": data_mod.resize_bilinear,
    "clean_antialiased": data_mod.resize_antialiased,
}


def evaluate(
    real_source,
    fake_source,
    extractor=None,
    resize_mode: str = "clean_antialiased",
    metrics: tuple = ("fid", "kid"),
) -> MetricReport:
    """Score fake images against real ones under a single resize mode.

    Sources are image directories or sequences of 8-bit (H,W,3) arrays; both
    sides always go through the same resize path. `metrics` selects any of
    fid / clean_fid / kid; the Fréchet value is reported under whichever of
    the two names was requested.
    """
    if resize_mode not in _RESIZERS:
        raise ConfigError(f"unknown resize mode {resize_mode!r}")
    extractor = extractor or PatchStatsExtractor()
    resize = _RESIZERS[resize_mode]
    real = _load_side(real_source, extractor, resize)
    fake = _load_side(fake_source, extractor, resize)
    f_real = extract_features(real, extractor)
    f_fake = extract_features(fake, extractor)
    report = MetricReport(
        extractor_name=extractor.name,
        resize_mode=resize_mode,
        n_real=f_real.shape[0],
        n_fake=f_fake.shape[0],
    )
    if "fid" in metrics or "clean_fid" in metrics:
        value = frechet_distance(gaussian_stats(f_real), gaussian_stats(f_fake))
        if "fid" in metrics:
            report.fid = value
        if "clean_fid" in metrics:
            report.clean_fid = value
    if "kid" in metrics:
        report.kid = kid_mmd(f_real, f_fake)
    return report


def evaluate_triple(real_source, fake_source, extractor=None) -> MetricReport:
    """The full metric triple: naive-resize FID plus clean FID and KID."""
    extractor = extractor or PatchStatsExtractor()
    naive = evaluate(real_source, fake_source, extractor,
                     resize_mode="naive_bilinear", metrics=("fid",))
    clean = evaluate(real_source, fake_source, extractor,
                     resize_mode="clean_antialiased", metrics=("clean_fid", "kid"))
    return MetricReport(
        extractor_name=extractor.name,
        resize_mode="fid=naive_bilinear;clean_fid,kid=clean_antialiased",
        n_real=naive.n_real,
        n_fake=naive.n_fake,
        fid=naive.fid,
        clean_fid=clean.clean_fid,
        kid=clean.kid,
    )
