"""Rendering of value maps, contour overlays, and prediction montages as
color rasters (saved as binary PPM by imgcore)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imgcore import BinaryMask, ColorImage, GrayImage, RoiBox, crop

GREEN = (0, 128, 0)
YELLOW = (255, 255, 0)
RED = (255, 0, 0)


@dataclass
class RenderSpec:
    """One overlay job: a value map blended over a gray base.

    `contours` is a list of (mask, rgb) pairs painted on top; `crop_box`
    crops every layer before rendering.
    """

    base: GrayImage
    value: object = None  # ValueMap or BinaryMask
    alpha: float = 0.5
    crop_box: RoiBox | None = None
    contours: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0,1]")


def ramp(v):
    """Green-to-yellow color ramp on values in [0,1], channels rounded."""
    v = np.asarray(v, dtype=np.float64)
    r = np.floor(255.0 * v + 0.5)
    g = np.floor(128.0 + 127.0 * v + 0.5)
    b = np.zeros_like(v)
    return np.stack([r, g, b], axis=-1).astype(np.uint8)


def _gray_rgb(base: GrayImage):
    if base.depth != 8:
        raise ValueError("render expects an 8-bit base image")
    return np.repeat(base.data.astype(np.float64)[:, :, None], 3, axis=2)


def _contour_pixels(mask: BinaryMask):
    """Mask pixels with at least one 4-neighbor outside the mask.

    The image border counts as outside, so a full-image mask contours its
    one-pixel border.
    """
    h, w = mask.data.shape
    padded = np.zeros((h + 2, w + 2), dtype=np.uint8)
    padded[1:-1, 1:-1] = mask.data
    inside = mask.data == 1
    neighbors_all_in = (
        (padded[:-2, 1:-1] == 1)
        & (padded[2:, 1:-1] == 1)
        & (padded[1:-1, :-2] == 1)
        & (padded[1:-1, 2:] == 1)
    )
    return inside & ~neighbors_all_in


def render_map(spec: RenderSpec):
    """Blend ramp(value) over the gray base: (1-a)*gray + a*ramp(v)."""
    base = spec.base
    value = spec.value
    contours = list(spec.contours)
    if spec.crop_box is not None:
        base = crop(base, spec.crop_box)
        if value is not None:
            value = crop(value, spec.crop_box)
        contours = [(crop(m, spec.crop_box), color) for m, color in contours]
    gray = _gray_rgb(base)
    if value is not None:
        if value.data.shape != base.data.shape:
            raise ValueError("value map resolution differs from the base")
        colored = ramp(value.data.astype(np.float64)).astype(np.float64)
        out = (1.0 - spec.alpha) * gray + spec.alpha * colored
    else:
        out = gray
    out = np.floor(out + 0.5).astype(np.uint8)
    for mask, color in contours:
        if mask.data.shape != base.data.shape:
            raise ValueError("contour mask resolution differs from the base")
        out[_contour_pixels(mask)] = color
    return ColorImage(out)


def render_contours(base: GrayImage, overlays):
    """Paint mask boundaries (e.g. tumor red, rectum yellow) over the base."""
    return render_map(RenderSpec(base=base, value=None, alpha=0.0, contours=list(overlays)))


def montage(cells, cols=3, pad=1, pad_value=32):
    """Tile color cells of one shape into a grid, row-major."""
    if not cells:
        raise ValueError("no cells to tile")
    shape = cells[0].data.shape
    for c in cells:
        if c.data.shape != shape:
            raise ValueError("montage cells differ in shape")
    rows = (len(cells) + cols - 1) // cols
    h, w = shape[0], shape[1]
    out = np.full(
        (rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad, 3),
        pad_value,
        dtype=np.uint8,
    )
    for i, cell in enumerate(cells):
        r, c = divmod(i, cols)
        y = r * (h + pad)
        x = c * (w + pad)
        out[y : y + h, x : x + w] = cell.data
    return ColorImage(out)
