"""Per-patient intensity windowing to 8-bit and contrast-limited adaptive
histogram equalization.

The windowing step scales both intensity extrema of a patient's slices by
0.9 and maps that range onto [0,255]. CLAHE follows Zuiderveld's scheme:
per-tile clipped histograms, uniform single-pass excess redistribution,
and bilinear blending of the per-tile lookup tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgcore import GrayImage

N_BINS = 256


@dataclass(frozen=True)
class WindowParams:
    """Intensity window [lo, hi] mapped onto the 8-bit range."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"degenerate window [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class ClaheParams:
    tiles_x: int = 8
    tiles_y: int = 8
    clip_factor: float = 2.0

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ValueError("tile counts must be >= 1")
        if self.clip_factor < 1.0:
            raise ValueError("clip_factor must be >= 1")


def compute_window(slices):
    """Window over all pixels of one patient's slices: 0.9x min, 0.9x max."""
    if not slices:
        raise ValueError("no slices given")
    depths = {s.depth for s in slices}
    if len(depths) != 1:
        raise ValueError(f"mixed slice depths {sorted(depths)}")
    gmin = min(int(s.data.min()) for s in slices)
    gmax = max(int(s.data.max()) for s in slices)
    return WindowParams(lo=0.9 * gmin, hi=0.9 * gmax)


def apply_window(img: GrayImage, w: WindowParams):
    """Map intensities through the window onto 8 bits.

    out = round(255 * clamp((v - lo)/(hi - lo), 0, 1)), half away from zero.
    """
    v = img.data.astype(np.float64)
    t = np.clip((v - w.lo) / (w.hi - w.lo), 0.0, 1.0)
    out = np.floor(255.0 * t + 0.5).astype(np.uint16)
    return GrayImage(out, depth=8)


# ---------------------------------------------------------------------------
# CLAHE
# ---------------------------------------------------------------------------


def _tile_bounds(extent, tiles):
    edges = [extent * t // tiles for t in range(tiles + 1)]
    return list(zip(edges[:-1], edges[1:]))


def clip_histogram(hist, clip_limit):
    """Clip a histogram at floor(clip_limit) and spread the excess uniformly.

    Returns (clipped, redistributed): `clipped` is the pre-redistribution
    histogram (no bin above the limit); `redistributed` adds the excess back,
    excess // 256 to every bin and the remainder to the lowest bins, in a
    single pass.
    """
    ceiling = int(np.floor(clip_limit))
    clipped = np.minimum(hist, ceiling)
    excess = int(hist.sum() - clipped.sum())
    redistributed = clipped + excess // N_BINS
    rem = excess % N_BINS
    if rem:
        redistributed = redistributed.copy()
        redistributed[:rem] += 1
    return clipped, redistributed


@dataclass
class ClaheTiles:
    """Per-tile CLAHE tables, kept inspectable for the clipping invariant."""

    luts: np.ndarray           # (tiles_y, tiles_x, 256) uint8 mappings
    clipped_hists: np.ndarray  # (tiles_y, tiles_x, 256) pre-redistribution
    clip_limits: np.ndarray    # (tiles_y, tiles_x) float limits
    x_bounds: list
    y_bounds: list


def clahe_tile_tables(img: GrayImage, p: ClaheParams):
    """Build the per-tile histograms, clip limits, and CDF lookup tables."""
    if img.depth != 8:
        raise ValueError("clahe expects an 8-bit image")
    if img.width < p.tiles_x or img.height < p.tiles_y:
        raise ValueError(
            f"image {img.width}x{img.height} smaller than tile grid "
            f"{p.tiles_x}x{p.tiles_y}"
        )
    xb = _tile_bounds(img.width, p.tiles_x)
    yb = _tile_bounds(img.height, p.tiles_y)
    luts = np.zeros((p.tiles_y, p.tiles_x, N_BINS), dtype=np.uint8)
    clipped_all = np.zeros((p.tiles_y, p.tiles_x, N_BINS), dtype=np.int64)
    limits = np.zeros((p.tiles_y, p.tiles_x), dtype=np.float64)
    for ty, (y0, y1) in enumerate(yb):
        for tx, (x0, x1) in enumerate(xb):
            tile = img.data[y0:y1, x0:x1]
            n_px = tile.size
            hist = np.bincount(tile.ravel(), minlength=N_BINS).astype(np.int64)
            limit = p.clip_factor * n_px / N_BINS
            clipped, redist = clip_histogram(hist, limit)
            cdf = np.cumsum(redist)
            luts[ty, tx] = np.floor(cdf * 255.0 / n_px + 0.5).astype(np.uint8)
            clipped_all[ty, tx] = clipped
            limits[ty, tx] = limit
    return ClaheTiles(luts, clipped_all, limits, xb, yb)


def _axis_blend(coords, bounds):
    """Indices of the two surrounding tiles and the upper-tile weight."""
    centers = np.array([(lo + hi - 1) / 2.0 for lo, hi in bounds])
    hi_idx = np.searchsorted(centers, coords, side="right")
    lo_idx = np.clip(hi_idx - 1, 0, len(centers) - 1)
    hi_idx = np.clip(hi_idx, 0, len(centers) - 1)
    span = centers[hi_idx] - centers[lo_idx]
    safe = np.where(span > 0, span, 1.0)
    w = np.where(span > 0, (coords - centers[lo_idx]) / safe, 0.0)
    return lo_idx, hi_idx, w


def clahe(img: GrayImage, p: ClaheParams = ClaheParams()):
    """Contrast-limited adaptive histogram equalization of an 8-bit image.

    Each output pixel bilinearly blends the lookup tables of the four
    surrounding tiles; edge tiles are replicated beyond the border centers.
    Deterministic: a constant image comes back constant.
    """
    tables = clahe_tile_tables(img, p)
    h, w = img.data.shape
    ty0, ty1, wy = _axis_blend(np.arange(h, dtype=np.float64), tables.y_bounds)
    tx0, tx1, wx = _axis_blend(np.arange(w, dtype=np.float64), tables.x_bounds)
    v = img.data.astype(np.intp)
    luts = tables.luts.astype(np.float64)
    l00 = luts[ty0[:, None], tx0[None, :], v]
    l01 = luts[ty0[:, None], tx1[None, :], v]
    l10 = luts[ty1[:, None], tx0[None, :], v]
    l11 = luts[ty1[:, None], tx1[None, :], v]
    wy = wy[:, None]
    wx = wx[None, :]
    out = (1 - wy) * ((1 - wx) * l00 + wx * l01) + wy * ((1 - wx) * l10 + wx * l11)
    return GrayImage(np.floor(out + 0.5).astype(np.uint16), depth=8)
