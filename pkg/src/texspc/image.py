"""Image handling: greyscale PNG loading, standardization, and the
raster-scan neighborhood machinery used to build training data.

An image is a plain 2-D float64 array, row-major, one intensity per pixel.
The causal neighborhood of a pixel with half-width ``l`` consists of the
``l`` full rows of width ``2l+1`` directly above it plus the ``l`` pixels
to its left in the same row, giving ``2*l*l + 2*l`` predictor values per
pixel.  Only interior pixels (those whose neighborhood fits entirely
inside the image) enter the training data, so an image with ``rows`` x
``cols`` pixels yields ``(rows - l) * (cols - 2l)`` training rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ImageTooSmallError, OutOfInteriorBoundsError, ZeroVarianceError

# ITU-R BT.601 luma weights for collapsing RGB inputs to greyscale.
_LUMA = (0.299, 0.587, 0.114)


def load_image(path) -> np.ndarray:
    """Load a PNG (or any Pillow-readable image) as float64 in [0, 255].

    8-bit greyscale is used as-is; 16-bit greyscale is rescaled to
    [0, 255]; RGB(A) and paletted images are converted to greyscale with
    BT.601 luma weights.
    """
    with Image.open(path) as im:
        if im.mode == "P":
            im = im.convert("RGB")
        if im.mode in ("RGB", "RGBA"):
            arr = np.asarray(im, dtype=np.float64)
            r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
            return _LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b
        if im.mode in ("I", "I;16", "I;16B", "I;16L"):
            arr = np.asarray(im, dtype=np.float64)
            return arr * (255.0 / 65535.0)
        if im.mode == "L":
            return np.asarray(im, dtype=np.float64)
        if im.mode == "F":
            return np.asarray(im, dtype=np.float64)
        arr = np.asarray(im.convert("L"), dtype=np.float64)
        return arr


def save_image_png(img: np.ndarray, path, bit_depth: int = 8) -> None:
    """Write a [0, 255] image as an 8- or 16-bit greyscale PNG."""
    img = np.asarray(img, dtype=np.float64)
    if bit_depth == 8:
        data = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        Image.fromarray(data, mode="L").save(path, format="PNG")
    elif bit_depth == 16:
        data = np.clip(np.rint(img * (65535.0 / 255.0)), 0, 65535).astype(np.uint32)
        pil = Image.new("I", (data.shape[1], data.shape[0]))
        pil.putdata(data.astype(np.int32).ravel())
        pil.save(path, format="PNG")
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")


def standardize(img: np.ndarray) -> np.ndarray:
    """Standardize an image to mean 0, standard deviation 1.

    Uses the population convention (divide by the pixel count).  Raises
    ZeroVarianceError for constant images.
    """
    img = np.asarray(img, dtype=np.float64)
    mean = img.mean()
    sd = img.std()
    if sd == 0.0 or not np.isfinite(sd):
        raise ZeroVarianceError("image has zero pixel variance; cannot standardize")
    return (img - mean) / sd


def neighborhood_size(l: int) -> int:
    """Number of predictors for neighborhood half-width l."""
    return 2 * l * l + 2 * l


def neighborhood_offsets(l: int) -> list[tuple[int, int]]:
    """(row, col) offsets of the causal neighborhood, in training order.

    Rows above first (offset -l .. -1), each scanned left to right over
    column offsets -l .. +l, then the same-row pixels at column offsets
    -l .. -1.  This ordering is the contract for every predictor matrix
    and fitted model in the project.
    """
    if l < 1:
        raise ValueError(f"neighborhood half-width must be >= 1, got {l}")
    offsets = [(dr, dc) for dr in range(-l, 0) for dc in range(-l, l + 1)]
    offsets += [(0, dc) for dc in range(-l, 0)]
    return offsets


def extract_neighborhood(img: np.ndarray, row: int, col: int, l: int) -> np.ndarray:
    """Predictor vector for one pixel, in the documented offset order."""
    img = np.asarray(img, dtype=np.float64)
    rows, cols = img.shape
    if not (l <= row < rows and l <= col <= cols - 1 - l):
        raise OutOfInteriorBoundsError(
            f"pixel ({row}, {col}) has no full neighborhood with l={l} "
            f"in a {rows}x{cols} image"
        )
    return np.array([img[row + dr, col + dc] for dr, dc in neighborhood_offsets(l)])


@dataclass(frozen=True)
class TrainingMatrix:
    """Response/predictor rows for every interior pixel, raster order."""

    response: np.ndarray      # shape (n_rows,)
    predictors: np.ndarray    # shape (n_rows, n_predictors)
    l: int
    source_shape: tuple[int, int]

    @property
    def n_rows(self) -> int:
        return self.response.shape[0]

    @property
    def n_predictors(self) -> int:
        return self.predictors.shape[1]


def interior_shape(rows: int, cols: int, l: int) -> tuple[int, int]:
    return rows - l, cols - 2 * l


def build_training_matrix(img: np.ndarray, l: int) -> TrainingMatrix:
    """Assemble the per-pixel training rows for neighborhood half-width l.

    Row r corresponds to the r-th interior pixel in raster order; its
    response is that pixel's value and its predictors are the neighborhood
    values in the order of neighborhood_offsets(l).  Built with slicing,
    one shifted view per offset, so it is deterministic and fast.
    """
    img = np.asarray(img, dtype=np.float64)
    rows, cols = img.shape
    ih, iw = interior_shape(rows, cols, l)
    if ih < 1 or iw < 1:
        raise ImageTooSmallError(
            f"{rows}x{cols} image has no interior pixels for l={l}"
        )
    response = img[l:, l:cols - l].reshape(-1).copy()
    offsets = neighborhood_offsets(l)
    preds = np.empty((ih * iw, len(offsets)), dtype=np.float64)
    for j, (dr, dc) in enumerate(offsets):
        block = img[l + dr:l + dr + ih, l + dc:l + dc + iw]
        preds[:, j] = block.reshape(-1)
    return TrainingMatrix(response=response, predictors=preds, l=l,
                          source_shape=(rows, cols))
