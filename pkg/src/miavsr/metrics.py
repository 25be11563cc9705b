"""Image quality metrics on [0, 1] images."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """``10 log10(1 / MSE)`` with peak 1; identical images give ``PSNR_CAP``."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA
    raise ValueError(f"expected H x W or H x W x 3, got {img.shape}")


def _gaussian(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of the BT.601 luma over all fully covered 11x11 Gaussian windows."""
    ya, yb = to_luma(a), to_luma(b)
    if ya.shape != yb.shape:
        raise ValueError(f"ssim: shapes {ya.shape} and {yb.shape} differ")
    if min(ya.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = _gaussian(SSIM_WINDOW, SSIM_SIGMA)
    mu_a, mu_b = _filter_valid(ya, g), _filter_valid(yb, g)
    var_a = _filter_valid(ya * ya, g) - mu_a ** 2
    var_b = _filter_valid(yb * yb, g) - mu_b ** 2
    cov = _filter_valid(ya * yb, g) - mu_a * mu_b
    c1, c2 = K1 ** 2, K2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    s = num / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(np.clip(s.mean(), -1.0, 1.0))
