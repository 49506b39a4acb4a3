"""Kernel-weighted moving-average and moving-variance charts.

These operate directly on the standardized image (no texture model) and
exist as comparison baselines for the residual-based charts.  Both use
the same Epanechnikov weights as the bp chart; the valid region loses
(w + 1) / 2 pixels per side.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve

from .errors import WindowTooLargeError
from .sms import SmsImage, _check_w, kernel_matrix


def _valid_shape(img: np.ndarray, w: int):
    H, W = img.shape
    oh, ow = H - w - 1, W - w - 1
    if oh < 1 or ow < 1:
        raise WindowTooLargeError(f"w={w} window does not fit in {H}x{W} image")
    return oh, ow


def epwma_sms(img: np.ndarray, w: int) -> SmsImage:
    """Epanechnikov-weighted moving average of the standardized image."""
    _check_w(w)
    img = np.asarray(img, dtype=np.float64)
    _valid_shape(img, w)
    K = kernel_matrix(w)
    out = fftconvolve(img, K, mode="valid") / K.sum()
    R = (w + 1) // 2
    return SmsImage(values=out, w=w, statistic="epwma", margin=R, offset=(R, R))


def epwmv_sms(img: np.ndarray, w: int, window_shape: str = "disk") -> SmsImage:
    """Epanechnikov-weighted moving variance of the standardized image.

    The local centring mean is unweighted over the kernel's closed
    support disk (lags with h^2 + m^2 <= R^2); window_shape="square"
    averages over the full (w+2) x (w+2) square instead.
    """
    _check_w(w)
    if window_shape not in ("disk", "square"):
        raise ValueError(f"unknown window_shape {window_shape!r}")
    img = np.asarray(img, dtype=np.float64)
    _valid_shape(img, w)
    K = kernel_matrix(w)
    ksum = K.sum()
    R = (w + 1) // 2
    if window_shape == "disk":
        lags = np.arange(-R, R + 1)
        mask = (lags[:, None] ** 2 + lags[None, :] ** 2) <= R * R
    else:
        mask = np.ones_like(K, dtype=bool)
    mean_w = mask.astype(np.float64)
    m = fftconvolve(img, mean_w, mode="valid") / mean_w.sum()
    a = fftconvolve(img * img, K, mode="valid")
    b = fftconvolve(img, K, mode="valid")
    out = (a - 2.0 * m * b + m * m * ksum) / ksum
    np.maximum(out, 0.0, out=out)  # guard tiny negative round-off
    return SmsImage(values=out, w=w, statistic="epwmv", margin=R, offset=(R, R))
