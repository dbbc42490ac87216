"""Image quality metrics on the [0, 1] intensity domain."""

from __future__ import annotations

import numpy as np

from .tensor_core import ImageTensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_hwc(x) -> np.ndarray:
    if isinstance(x, ImageTensor):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected a 2-d or 3-d image array, got {arr.ndim}-d")
    return arr


def psnr(pred, ref, peak: float = 1.0) -> float | None:
    """Peak signal-to-noise ratio in dB; None when the images are equal.

    Values are compared as-is (no clipping), with the error accumulated
    in float64. A zero mean-squared error yields the distinguished None
    rather than an infinity so report code can render a saturation marker.
    """
    a = _as_hwc(pred).astype(np.float64)
    b = _as_hwc(ref).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0.0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return None
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed_mean(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    views = np.lib.stride_tricks.sliding_window_view(plane, kernel.shape)
    return np.einsum("ijkl,kl->ij", views, kernel)


def ssim(pred, ref, peak: float = 1.0) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows.

    Gaussian weighting with sigma 1.5, stability constants K1 = 0.01 and
    K2 = 0.03 on the given peak. Channels are scored independently and
    averaged. Identical inputs score exactly 1.0.
    """
    a = _as_hwc(pred).astype(np.float64)
    b = _as_hwc(ref).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    h, w, channels = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(
            f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    scores = []
    for ch in range(channels):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mu_x = _windowed_mean(x, kernel)
        mu_y = _windowed_mean(y, kernel)
        var_x = _windowed_mean(x * x, kernel) - mu_x * mu_x
        var_y = _windowed_mean(y * y, kernel) - mu_y * mu_y
        cov = _windowed_mean(x * y, kernel) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))
