"""Spatial moving statistics over residual images.

Each statistic scans a w x w window across its input and produces a
smaller map (the valid region); the image-level monitoring statistic is
the maximum over that map.  Two charts are implemented here:

* ad: windowed Anderson-Darling distance between the window's residuals
  and the in-control reference distribution.
* bp: windowed Box-Pierce-type sum of squared local spatial
  autocovariances of the residuals, kernel-weighted.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve

from .errors import EmptyValidRegionError, WindowTooLargeError
from .refcdf import ReferenceCdf
from .tree import ResidualImage

_MAGIC = b"TXSPCSMS"

KINDS = ("ad", "bp", "epwma", "epwmv")


def _check_w(w: int) -> None:
    if w < 3 or w % 2 == 0:
        raise ValueError(f"window width must be an odd integer >= 3, got {w}")


@dataclass(frozen=True)
class SmsConfig:
    kind: str
    w: int
    # epwmv centring window: unweighted mean over the kernel support disk
    # or the full square
    window_shape: str = "disk"
    bp_method: str = "auto"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown statistic kind {self.kind!r}")
        _check_w(self.w)
        if self.window_shape not in ("disk", "square"):
            raise ValueError(f"unknown window_shape {self.window_shape!r}")

    @property
    def two_sided(self) -> bool:
        return self.kind in ("epwma", "epwmv")


@dataclass(frozen=True)
class SmsImage:
    """A moving-statistic map plus the bookkeeping to place it.

    values[r, c] is the statistic of the window centred on source pixel
    (r + offset[0], c + offset[1]).  margin is the per-side shrink
    relative to the statistic's immediate input (the residual image for
    ad/bp, the standardized image for the weighted-average baselines).
    """

    values: np.ndarray
    w: int
    statistic: str
    margin: int
    offset: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def image_statistic(sms: SmsImage) -> float:
    """Image-level monitoring statistic: the maximum over the map."""
    if sms.values.size == 0:
        raise EmptyValidRegionError("statistic map is empty")
    return float(np.max(sms.values))


def save_sms(sms: SmsImage, path) -> None:
    from .util import atomic_write_bytes
    header = {
        "format": 1,
        "statistic": sms.statistic,
        "w": sms.w,
        "margin": sms.margin,
        "offset": list(sms.offset),
        "shape": list(sms.values.shape),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = np.ascontiguousarray(sms.values, dtype="<f8").tobytes()
    atomic_write_bytes(path, _MAGIC + struct.pack("<I", len(hb)) + hb + body)


def load_sms(path) -> SmsImage:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _MAGIC:
        raise ValueError("not a statistic map file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    shape = tuple(header["shape"])
    values = np.frombuffer(data[12 + hlen:], dtype="<f8")
    if values.size != shape[0] * shape[1]:
        raise ValueError("statistic map file truncated")
    return SmsImage(
        values=values.reshape(shape).astype(np.float64),
        w=header["w"],
        statistic=header["statistic"],
        margin=header["margin"],
        offset=tuple(header["offset"]),
    )


def epanechnikov(h, m, w: int):
    """Radial Epanechnikov weight at lag (h, m) for window width w.

    The radius is R = (w + 1) / 2; weights fall to zero at squared
    distance R^2 and beyond.
    """
    R = (w + 1) / 2.0
    d = (np.asarray(h, dtype=np.float64) ** 2 + np.asarray(m, dtype=np.float64) ** 2) / (R * R)
    out = np.where(d <= 1.0, 0.75 * (1.0 - d), 0.0)
    return float(out) if out.ndim == 0 else out


def kernel_matrix(w: int) -> np.ndarray:
    """(w+2) x (w+2) grid of Epanechnikov weights at lags -R..R."""
    _check_w(w)
    R = (w + 1) // 2
    lags = np.arange(-R, R + 1)
    return epanechnikov(lags[:, None], lags[None, :], w)


def ad_window_statistic(window: np.ndarray, cdf: ReferenceCdf) -> float:
    """Anderson-Darling statistic of one window against the reference CDF."""
    r = np.sort(np.asarray(window, dtype=np.float64).ravel())
    n = r.size
    k = np.arange(1, n + 1, dtype=np.float64)
    s = np.sum((2.0 * k - 1.0) * (cdf.log_eval(r) + cdf.log_sf(r)[::-1]))
    return float(-n - s / n)


def ad_sms(res: ResidualImage, cdf: ReferenceCdf, w: int) -> SmsImage:
    """Windowed Anderson-Darling map of a residual image.

    Uses the identity that sorting ln(phi) and ln(1 - phi) ascending
    gives both order-statistic sequences needed, so the whole map
    reduces to two windowed sorts and a pair of dot products.  Computed
    in row blocks to bound the transient window buffers.
    """
    _check_w(w)
    vals = res.values
    H, W = vals.shape
    oh, ow = H - w + 1, W - w + 1
    if oh < 1 or ow < 1:
        raise WindowTooLargeError(f"w={w} window does not fit in {H}x{W} residual map")
    n = w * w
    lo = cdf.log_eval(vals)
    hi = cdf.log_sf(vals)
    coef = 2.0 * np.arange(n, dtype=np.float64) + 1.0
    out = np.empty((oh, ow), dtype=np.float64)
    block = max(1, int(4e6) // max(ow * n, 1))
    for r0 in range(0, oh, block):
        r1 = min(r0 + block, oh)
        w1 = sliding_window_view(lo[r0:r1 + w - 1], (w, w)).reshape(r1 - r0, ow, n)
        w2 = sliding_window_view(hi[r0:r1 + w - 1], (w, w)).reshape(r1 - r0, ow, n)
        s = np.sort(w1, axis=-1) @ coef
        s += np.sort(w2, axis=-1) @ coef
        out[r0:r1] = -n - s / n
    half = (w - 1) // 2
    return SmsImage(values=out, w=w, statistic="ad", margin=half,
                    offset=(res.offset_row + half, res.offset_col + half))


def _bp_direct(vals: np.ndarray, w: int, karr: np.ndarray, ksum: float) -> np.ndarray:
    H, W = vals.shape
    half = (w - 1) // 2
    oh, ow = H - 2 * w, W - 2 * w
    kflat = karr.ravel()
    T = np.zeros((oh, ow), dtype=np.float64)
    for da in range(-half, half + 1):
        u0, u1 = max(0, -da), H - 1 - max(0, da)
        for db in range(-half, half + 1):
            v0, v1 = max(0, -db), W - 1 - max(0, db)
            q = vals[u0:u1 + 1, v0:v1 + 1] * vals[u0 + da:u1 + 1 + da, v0 + db:v1 + 1 + db]
            sw = sliding_window_view(q, (w, w))
            a0, b0 = w - half - u0, w - half - v0
            sw = sw[a0:a0 + oh, b0:b0 + ow].reshape(oh * ow, w * w)
            cov = (sw @ kflat) / ksum
            T += (cov * cov).reshape(oh, ow)
    return T


def _bp_fft(vals: np.ndarray, w: int, karr: np.ndarray, ksum: float) -> np.ndarray:
    H, W = vals.shape
    half = (w - 1) // 2
    oh, ow = H - 2 * w, W - 2 * w
    # every lag product restricted to the common domain where all lags exist
    qh, qw = H - w + 1, W - w + 1
    deltas = [(da, db) for da in range(-half, half + 1) for db in range(-half, half + 1)]
    T = np.zeros((oh, ow), dtype=np.float64)
    batch = max(1, int(3e6) // max(qh * qw, 1))
    for s in range(0, len(deltas), batch):
        chunk = deltas[s:s + batch]
        q = np.empty((len(chunk), qh, qw), dtype=np.float64)
        for i, (da, db) in enumerate(chunk):
            q[i] = (vals[half:half + qh, half:half + qw]
                    * vals[half + da:half + da + qh, half + db:half + db + qw])
        conv = fftconvolve(q, karr[None, :, :], mode="valid", axes=(1, 2))
        cov = conv[:, 1:1 + oh, 1:1 + ow] / ksum
        T += np.sum(cov * cov, axis=0)
    return T


def bp_sms(res: ResidualImage, w: int, method: str = "auto") -> SmsImage:
    """Windowed sum of squared kernel-weighted local autocovariances.

    For the window centred at i the statistic is sum over lags delta in
    the w x w window of Cov(i, i+delta)^2, where Cov is the Epanechnikov
    weighted average of residual lag products around i.  Each lag's
    covariance field is a 2-d convolution; "direct" evaluates it as
    sliding-window dot products (exact, fast for small w), "fft" batches
    all lags through fftconvolve.  "auto" picks direct for w <= 9.
    """
    _check_w(w)
    if method not in ("auto", "direct", "fft"):
        raise ValueError(f"unknown method {method!r}")
    vals = res.values
    H, W = vals.shape
    if H - 2 * w < 1 or W - 2 * w < 1:
        raise WindowTooLargeError(f"w={w} window does not fit in {H}x{W} residual map")
    kfull = kernel_matrix(w)
    ksum = float(kfull.sum())
    karr = kfull[1:-1, 1:-1]  # zero ring trimmed; support radius is (w-1)/2
    if method == "auto":
        method = "direct" if w <= 9 else "fft"
    T = (_bp_direct if method == "direct" else _bp_fft)(vals, w, karr, ksum)
    return SmsImage(values=T, w=w, statistic="bp", margin=w,
                    offset=(res.offset_row + w, res.offset_col + w))
