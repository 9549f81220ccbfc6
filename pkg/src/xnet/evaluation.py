"""Distribution-distance evaluation, latent-space visualization, and the
luma-threshold foreground extractor with its ROC-style scoring.

The distance pipeline is deliberately separable so each stage can be checked
against an independent oracle: feature extraction (fixed "pixels8" features
or a frozen encoder's pooled latents), Gaussian moment fitting, a PSD matrix
square root, and the closed-form Frechet distance between two Gaussians.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DataError, box_resample, to_batch

__all__ = [
    "extract_features",
    "fit_gaussian",
    "matrix_sqrt_psd",
    "frechet_distance",
    "fid_between",
    "latent_pca",
    "magnitude_map",
    "latent_views",
    "luma",
    "foreground_extract",
    "roc_curve",
    "roc_auc",
    "write_csv",
    "PIXEL_FEATURE_SIDE",
    "FOREGROUND_LUMA_THRESHOLD",
]

PIXEL_FEATURE_SIDE = 8  # "pixels8" features: 8 x 8 x 3 = 192 dimensions
FOREGROUND_LUMA_THRESHOLD = 243.0
_EVAL_BATCH = 16


def _as_stack(images) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise DataError(f"expected an image stack [N,H,W,3], got shape {arr.shape}")
    if len(arr) == 0:
        raise DataError("cannot extract features from an empty image stack")
    return arr


def _pixel_features(images: np.ndarray) -> np.ndarray:
    side = PIXEL_FEATURE_SIDE
    feats = np.stack([box_resample(im, side, side).reshape(-1) for im in images])
    return feats / 255.0


def _latent_features(images: np.ndarray, ckpt_path: str) -> np.ndarray:
    # imported here so the pixel route never touches network code
    from .training import bundle_from_checkpoint, load_checkpoint

    bundle = bundle_from_checkpoint(load_checkpoint(ckpt_path), with_train_nets=False)
    side = bundle.spec.image_side
    if images.shape[1] != side or images.shape[2] != side:
        images = np.stack([
            np.clip(np.rint(box_resample(im, side, side)), 0, 255).astype(np.uint8)
            for im in images
        ])
    rows = []
    for lo in range(0, len(images), _EVAL_BATCH):
        z = bundle.enc_a2b(to_batch(images[lo : lo + _EVAL_BATCH]))
        rows.append(z.data.astype(np.float64).mean(axis=(2, 3)))  # global average pool
    return np.concatenate(rows)


def extract_features(images, extractor: str = "pixels8") -> np.ndarray:
    """Image stack -> float64 feature matrix [N, d].

    Extractors: "pixels8" (area-resample to 8x8 RGB, flatten, scale to [0,1])
    or "latent:<checkpoint>" (frozen a->b encoder, spatially averaged).
    """
    stack = _as_stack(images)
    if extractor == "pixels8":
        return _pixel_features(stack)
    if extractor.startswith("latent:"):
        path = extractor.split(":", 1)[1]
        if not path:
            raise DataError("latent extractor needs a checkpoint: use latent:<path>")
        return _latent_features(stack, path)
    raise DataError(f"unknown feature extractor {extractor!r}")


def fit_gaussian(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and regularized unbiased covariance of rows; needs n >= 2.

    The covariance gets a ridge of 1e-6 * trace/d on the diagonal so later
    square roots stay well-posed even for rank-deficient feature sets.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise DataError(f"feature matrix must be 2-d, got shape {feats.shape}")
    n, d = feats.shape
    if n < 2:
        raise DataError(f"need at least 2 samples to fit a Gaussian, got {n}")
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, ddof=1).reshape(d, d)
    ridge = 1e-6 * np.trace(cov) / d
    return mu, cov + ridge * np.eye(d)


def matrix_sqrt_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    The input is symmetrized and negative eigenvalues (numerical noise) are
    clamped to zero, so the result R is symmetric PSD with R @ R ~= mat.
    """
    m = np.asarray(mat, dtype=np.float64)
    m = (m + m.T) / 2.0
    vals, vecs = np.linalg.eigh(m)
    root = np.sqrt(np.clip(vals, 0.0, None))
    return (vecs * root) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Squared Frechet (2-Wasserstein) distance between two Gaussians."""
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    diff = mu1 - mu2
    root1 = matrix_sqrt_psd(cov1)
    cross = matrix_sqrt_psd(root1 @ np.asarray(cov2, dtype=np.float64) @ root1)
    val = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))
    # exact-zero distances come out as tiny negatives; keep the metric >= 0
    return max(val, 0.0)


def fid_between(images_x, images_y, extractor: str = "pixels8") -> float:
    fx = extract_features(images_x, extractor)
    fy = extract_features(images_y, extractor)
    return frechet_distance(*fit_gaussian(fx), *fit_gaussian(fy))


# ---------------------------------------------------------------------------
# latent visualization


def _min_max_01(arr: np.ndarray, axis=None) -> np.ndarray:
    lo = arr.min(axis=axis, keepdims=True)
    hi = arr.max(axis=axis, keepdims=True)
    span = hi - lo
    out = np.zeros_like(arr)
    np.divide(arr - lo, span, out=out, where=span > 0)
    return out


def latent_pca(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project a latent volume [C,H,W] onto its top-3 spatial principal axes.

    Positions act as samples, channels as variables.  Returns (rgb, basis):
    rgb is [H,W,3] in [0,1] (each component min-max scaled, degenerate ones
    all-zero) and basis is the [3,C] orthonormal component matrix.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise DataError(f"latent volume must be [C,H,W], got shape {z.shape}")
    c, h, w = z.shape
    if h * w < 3:
        raise DataError(f"need at least 3 spatial positions for 3 components, got {h}x{w}")
    if c < 3:
        raise DataError(f"need at least 3 channels for 3 components, got {c}")
    x = z.reshape(c, h * w).T  # [positions, channels]
    x = x - x.mean(axis=0)
    _, sing, vt = np.linalg.svd(x, full_matrices=False)
    basis = vt[:3]
    proj = (x @ basis.T).reshape(h, w, 3)
    # components below numerical rank carry pure float noise; render them flat
    live = sing[:3] > 1e-9 * max(sing[0], np.finfo(np.float64).tiny)
    rgb = np.stack(
        [_min_max_01(proj[:, :, i]) if live[i] else np.zeros((h, w)) for i in range(3)],
        axis=-1,
    )
    return rgb, basis


def magnitude_map(z: np.ndarray) -> np.ndarray:
    """Per-position channel L2 norm of [C,H,W], min-max scaled to [0,1]."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise DataError(f"latent volume must be [C,H,W], got shape {z.shape}")
    return _min_max_01(np.sqrt((z * z).sum(axis=0)))


def latent_views(encoder, image_u8: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Encode one [H,W,3] uint8 image and render both views as uint8 images."""
    z = encoder(to_batch(np.asarray(image_u8)[None])).data[0]
    rgb, _ = latent_pca(z)
    mag = magnitude_map(z)
    to_u8 = lambda a: np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    return to_u8(rgb), to_u8(mag)


# ---------------------------------------------------------------------------
# foreground extraction and scoring


def luma(img: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an RGB uint8 image, as float64 [H,W]."""
    arr = np.asarray(img, dtype=np.float64)
    return arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114


def foreground_extract(img: np.ndarray, threshold: float = FOREGROUND_LUMA_THRESHOLD) -> np.ndarray:
    """Whiten near-white background pixels, keep everything else verbatim.

    A pixel is background iff its luma is strictly above `threshold`; such
    pixels become pure white, all others are returned unchanged.
    """
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[-1] != 3 or arr.dtype != np.uint8:
        raise DataError(f"expected a uint8 [H,W,3] image, got {arr.dtype} {arr.shape}")
    out = arr.copy()
    out[luma(arr) > threshold] = 255
    return out


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC points for real-valued scores vs binary labels (1 = positive).

    Tied scores collapse into a single threshold so the curve is invariant
    under any strictly increasing transform of the scores.  Returns
    (fpr, tpr, thresholds) with a leading (0, 0) point.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DataError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        raise DataError("ROC needs at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    boundary = np.nonzero(np.diff(s_sorted))[0]  # last index of each tie group
    last = np.concatenate([boundary, [len(s_sorted) - 1]])
    tp = np.cumsum(y_sorted)[last]
    fp = np.cumsum(1 - y_sorted)[last]
    fpr = np.concatenate([[0.0], fp / neg])
    tpr = np.concatenate([[0.0], tp / pos])
    thresholds = np.concatenate([[np.inf], s_sorted[last]])
    return fpr, tpr, thresholds


def roc_auc(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.trapezoid(tpr, fpr))


# ---------------------------------------------------------------------------
# report emission


def write_csv(path, header: list[str], rows) -> None:
    """Plain CSV with floats at 9 significant digits."""

    def cell(v) -> str:
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            if not math.isfinite(v):
                return str(v)
            return f"{float(v):.9g}"
        return str(v)

    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
