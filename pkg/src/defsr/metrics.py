"""Luminance-channel image quality metrics and CSV reporting.

PSNR and SSIM are computed on the Y plane of images in [0, 1].  PSNR is
capped at 99.0 dB so identical images produce finite report rows.  SSIM
is the standard single-scale form: 11x11 Gaussian window with sigma 1.5,
K1 = 0.01, K2 = 0.03, dynamic range 1.0, averaged over valid window
positions only.
"""

from __future__ import annotations

import csv

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imagecore import require_image, to_y_channel

__all__ = ["PSNR_CAP", "psnr_y", "ssim_y", "write_report"]

PSNR_CAP = 99.0

_WIN = 11
_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


def _check_pair(a, b):
    a = require_image(np.asarray(a, dtype=np.float64), 3, "a")
    b = require_image(np.asarray(b, dtype=np.float64), 3, "b")
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr_y(a, b) -> float:
    """Peak signal-to-noise ratio in dB on the luminance channel."""
    a, b = _check_pair(a, b)
    diff = to_y_channel(a) - to_y_channel(b)
    mse = float(np.mean(diff * diff))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gauss_window() -> np.ndarray:
    r = np.arange(_WIN, dtype=np.float64) - (_WIN - 1) / 2.0
    w = np.exp(-(r * r) / (2.0 * _SIGMA * _SIGMA))
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation with the 1-D window along each axis
    x = sliding_window_view(x, _WIN, axis=0) @ w
    return sliding_window_view(x, _WIN, axis=1) @ w


def ssim_y(a, b) -> float:
    """Mean structural similarity on the luminance channel."""
    a, b = _check_pair(a, b)
    h, w_ = a.shape[:2]
    if min(h, w_) < _WIN:
        raise ValueError(f"image {h}x{w_} smaller than the {_WIN}x{_WIN} window")
    ya = to_y_channel(a)
    yb = to_y_channel(b)
    w = _gauss_window()
    c1 = _K1 * _K1
    c2 = _K2 * _K2

    mu_a = _filter_valid(ya, w)
    mu_b = _filter_valid(yb, w)
    var_a = _filter_valid(ya * ya, w) - mu_a * mu_a
    var_b = _filter_valid(yb * yb, w) - mu_b * mu_b
    cov = _filter_valid(ya * yb, w) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def write_report(rows, path) -> None:
    """Write per-image metric rows plus a mean summary row as CSV.

    ``rows`` is an iterable of (image_id, psnr, ssim).
    """
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["image_id", "psnr", "ssim"])
        for image_id, p, s in rows:
            out.writerow([image_id, f"{p:.6f}", f"{s:.6f}"])
        if rows:
            mp = sum(r[1] for r in rows) / len(rows)
            ms = sum(r[2] for r in rows) / len(rows)
            out.writerow(["mean", f"{mp:.6f}", f"{ms:.6f}"])
