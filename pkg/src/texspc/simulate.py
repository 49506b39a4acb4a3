"""Synthetic textured surfaces: a first-order spatial autoregressive
field rendered to greyscale, with optional localized defects.

The in-control field follows
    y(i, k) = phi1 * y(i-1, k) + phi2 * y(i, k-1) + eps(i, k)
with zero boundary values and iid Gaussian noise.  A burn-in border of
extra rows and columns is generated and cropped so the retained field is
effectively stationary.  Defects are injected into the raw field before
the greyscale rescale, so they also shift the rescale anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .errors import ConstantFieldError, PlacementOutOfBoundsError


@dataclass(frozen=True)
class SarParams:
    phi1: float = 0.6
    phi2: float = 0.35
    sigma: float = 1.0
    burn_in: int = 50


def generate_sar(rows: int, cols: int, params: SarParams = SarParams(),
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Raw SAR field of the requested size (burn-in border cropped)."""
    if rng is None:
        rng = np.random.default_rng()
    R = rows + params.burn_in
    C = cols + params.burn_in
    eps = params.sigma * rng.standard_normal((R, C))
    field = np.empty((R, C), dtype=np.float64)
    prev = np.zeros(C, dtype=np.float64)
    b, a = [1.0], [1.0, -params.phi2]
    for i in range(R):
        # within a row the recursion is AR(1) in the column index
        z = params.phi1 * prev + eps[i]
        prev = lfilter(b, a, z)
        field[i] = prev
    return field[params.burn_in:, params.burn_in:]


def to_greyscale(field: np.ndarray) -> np.ndarray:
    """Affine map of the field onto [0, 255] (min to 0, max to 255)."""
    lo = float(field.min())
    hi = float(field.max())
    if hi == lo:
        raise ConstantFieldError("field has no range to rescale")
    # divide before scaling so the extremes land on 0 and 255 exactly
    return (field - lo) / (hi - lo) * 255.0


@dataclass(frozen=True)
class DefectSpec:
    """A localized defect: what to inject, how big, and where.

    center is (row, col); None places the defect uniformly at random so
    it fits entirely inside the field.  sigma controls the white-noise
    kinds: None (the default) matches the marginal mean and sd of the
    field being injected, which destroys the spatial correlation while
    keeping the greyscale distribution, so the defect blends in
    visually; an explicit float gives mean-zero noise with that sd.
    ar_scale multiplies both AR coefficients for milder_ar_ellipse.
    """

    kind: str
    size: tuple[int, int]
    center: tuple[int, int] | None = None
    sigma: float | None = None
    ar_scale: float = 0.9

    _KINDS = ("white_noise_ellipse", "milder_ar_ellipse",
              "black_square", "white_noise_square")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown defect kind {self.kind!r}")
        if min(self.size) < 0:
            raise ValueError("defect size must be nonnegative")


def _pick_center(spec: DefectSpec, shape, rng: np.random.Generator):
    if spec.center is not None:
        return spec.center
    lo = (spec.size[0] // 2, spec.size[1] // 2)
    hi = (shape[0] - 1 - lo[0], shape[1] - 1 - lo[1])
    if lo[0] > hi[0] or lo[1] > hi[1]:
        raise PlacementOutOfBoundsError(
            f"defect of size {spec.size} cannot fit in field {shape}")
    return (int(rng.integers(lo[0], hi[0] + 1)),
            int(rng.integers(lo[1], hi[1] + 1)))


def _region_mask(spec: DefectSpec, shape, center) -> np.ndarray:
    if min(spec.size) == 0:
        return np.zeros(shape, dtype=bool)
    r, c = np.ogrid[:shape[0], :shape[1]]
    if spec.kind.endswith("ellipse"):
        a1 = spec.size[0] / 2.0
        a2 = spec.size[1] / 2.0
        mask = ((r - center[0]) / a1) ** 2 + ((c - center[1]) / a2) ** 2 <= 1.0
    else:
        h1lo, h1hi = (spec.size[0] - 1) // 2, spec.size[0] // 2
        h2lo, h2hi = (spec.size[1] - 1) // 2, spec.size[1] // 2
        mask = ((r >= center[0] - h1lo) & (r <= center[0] + h1hi)
                & (c >= center[1] - h2lo) & (c <= center[1] + h2hi))
    return mask


def inject_defect(field: np.ndarray, spec: DefectSpec,
                  rng: np.random.Generator,
                  params: SarParams = SarParams()):
    """Return (modified field copy, boolean defect mask)."""
    shape = field.shape
    center = _pick_center(spec, shape, rng)
    if spec.center is not None:
        if center[0] - spec.size[0] // 2 < 0 \
                or center[0] + spec.size[0] // 2 > shape[0] - 1 \
                or center[1] - spec.size[1] // 2 < 0 \
                or center[1] + spec.size[1] // 2 > shape[1] - 1:
            raise PlacementOutOfBoundsError("defect region leaves the field")
    mask = _region_mask(spec, shape, center)
    out = field.copy()
    n = int(mask.sum())
    if spec.kind in ("white_noise_ellipse", "white_noise_square"):
        if spec.sigma is None:
            loc, scale = float(field.mean()), float(field.std())
        else:
            loc, scale = 0.0, spec.sigma
        out[mask] = loc + scale * rng.standard_normal(n)
    elif spec.kind == "milder_ar_ellipse":
        milder = SarParams(phi1=params.phi1 * spec.ar_scale,
                           phi2=params.phi2 * spec.ar_scale,
                           sigma=params.sigma, burn_in=params.burn_in)
        aux = generate_sar(shape[0], shape[1], milder, rng)
        out[mask] = aux[mask]
    else:  # black_square
        out[mask] = field.min()
    return out, mask


def make_image(rows: int, cols: int, params: SarParams = SarParams(),
               rng: np.random.Generator | None = None,
               defect: DefectSpec | None = None):
    """Greyscale image plus defect mask (None when in control)."""
    if rng is None:
        rng = np.random.default_rng()
    field = generate_sar(rows, cols, params, rng)
    mask = None
    if defect is not None:
        field, mask = inject_defect(field, defect, rng, params)
    return to_greyscale(field), mask
