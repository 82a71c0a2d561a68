"""Seeded training-time augmentation: per-mini-batch random rescaling plus
photometric and geometric jitter.

Everything is a pure function of (input, generator, config). Draw order is
fixed — per item: rotation angle, flip coin (only when flips are enabled),
four crop insets, then the three photometric factors; finally one scale draw
for the whole batch — so identical seeds give bit-identical batches.

Validation and test images never pass through here; they are resized once to
the fixed evaluation size via `resize_eval`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .imgcore import BinaryMask, GrayImage, resample, resample_mask


@dataclass(frozen=True)
class AugmentConfig:
    scale_min: int = 48
    scale_max: int = 80
    scale_step: int = 16
    brightness: float = 0.2
    contrast: float = 0.2
    sharpness: float = 0.2
    rotation_max: float = 15.0
    crop_max_frac: float = 0.10
    flip: bool = True

    def __post_init__(self):
        if self.scale_min > self.scale_max:
            raise ConfigError("scale_min must not exceed scale_max")
        if self.scale_step < 1:
            raise ConfigError("scale_step must be >= 1")
        if self.scale_min % self.scale_step or self.scale_max % self.scale_step:
            raise ConfigError(
                f"scale bounds ({self.scale_min}, {self.scale_max}) must be "
                f"multiples of scale_step {self.scale_step}"
            )
        if not 0.0 <= self.crop_max_frac < 0.5:
            raise ConfigError("crop_max_frac must lie in [0, 0.5)")

    def scales(self):
        return list(range(self.scale_min, self.scale_max + 1, self.scale_step))


@dataclass
class Batch:
    """Parallel lists of images and (rectum, tumor) mask pairs, uniform size."""

    images: list
    masks: list

    def __post_init__(self):
        if len(self.images) != len(self.masks):
            raise ValueError("images and masks lists differ in length")
        if not self.images:
            raise ValueError("empty batch")
        shape = self.images[0].data.shape
        for img, pair in zip(self.images, self.masks):
            if img.data.shape != shape:
                raise ValueError("batch items differ in resolution")
            for m in pair:
                if m.data.shape != img.data.shape:
                    raise ValueError("mask resolution differs from its image")

    def __len__(self):
        return len(self.images)


# ---------------------------------------------------------------------------
# Geometric primitives
# ---------------------------------------------------------------------------


_CENTERED_GRIDS = {}


def _centered_grid(h, w):
    key = (h, w)
    if key not in _CENTERED_GRIDS:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
        _CENTERED_GRIDS[key] = (yy, xx)
    return _CENTERED_GRIDS[key]


def _inverse_rotation_grid(h, w, angle_deg):
    t = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = _centered_grid(h, w)
    ct, st = np.cos(t), np.sin(t)
    sx = ct * xx + st * yy + cx
    sy = -st * xx + ct * yy + cy
    return sy, sx


def _sample_bilinear(data, sy, sx):
    h, w = data.shape
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    fy = sy - y0
    fx = sx - x0
    y0i = np.clip(y0.astype(np.intp), 0, h - 1)
    x0i = np.clip(x0.astype(np.intp), 0, w - 1)
    y1i = np.where(y0 < 0, y0i, np.clip(y0i + 1, 0, h - 1))
    x1i = np.where(x0 < 0, x0i, np.clip(x0i + 1, 0, w - 1))
    d = data.astype(np.float64)
    top = d[y0i, x0i] * (1 - fx) + d[y0i, x1i] * fx
    bot = d[y1i, x0i] * (1 - fx) + d[y1i, x1i] * fx
    return top * (1 - fy) + bot * fy


def _nearest_lookup(h, w, sy, sx):
    yi = np.clip(np.rint(sy).astype(np.intp), 0, h - 1)
    xi = np.clip(np.rint(sx).astype(np.intp), 0, w - 1)
    return yi, xi


def _sample_nearest(data, sy, sx):
    yi, xi = _nearest_lookup(*data.shape, sy, sx)
    return data[yi, xi]


def rotate_image(img: GrayImage, angle_deg):
    """Rotate about the raster center, bilinear with edge clamping."""
    if angle_deg == 0.0:
        return GrayImage(img.data.copy(), depth=img.depth)
    sy, sx = _inverse_rotation_grid(img.height, img.width, angle_deg)
    out = _sample_bilinear(img.data, sy, sx)
    return GrayImage(np.floor(out + 0.5).astype(np.uint16), depth=img.depth)


def rotate_mask(mask: BinaryMask, angle_deg):
    """Rotate about the raster center, nearest neighbor; values stay binary."""
    if angle_deg == 0.0:
        return BinaryMask(mask.data.copy())
    sy, sx = _inverse_rotation_grid(mask.height, mask.width, angle_deg)
    return BinaryMask(_sample_nearest(mask.data, sy, sx))


def _flip_h(raster):
    return dataclasses.replace(raster, data=raster.data[:, ::-1].copy())


def _crop_square(data, left, right, top, bottom):
    h, w = data.shape
    sub = data[top : h - bottom, left : w - right]
    side = min(sub.shape)
    oy = (sub.shape[0] - side) // 2
    ox = (sub.shape[1] - side) // 2
    return sub[oy : oy + side, ox : ox + side]


# ---------------------------------------------------------------------------
# Jitter operations
# ---------------------------------------------------------------------------


def _box_blur3(x):
    p = np.pad(x, 1, mode="edge")
    acc = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            acc = acc + p[dy : dy + x.shape[0], dx : dx + x.shape[1]]
    return acc / 9.0


def apply_photometric(img: GrayImage, f_b, f_c, f_s):
    """Brightness, contrast, then sharpness with explicit factors.

    brightness: v*f_b; contrast: mean + (v-mean)*f_c; sharpness:
    v + (v - boxblur3(v))*(f_s-1). A factor of exactly 1 leaves that step
    out; the result is clamped to [0,255] and rounded once at the end.
    """
    if img.depth != 8:
        raise ValueError("photometric jitter expects an 8-bit image")
    x = img.data.astype(np.float64)
    if f_b != 1.0:
        x = x * f_b
    if f_c != 1.0:
        m = x.mean()
        x = m + (x - m) * f_c
    if f_s != 1.0:
        x = x + (x - _box_blur3(x)) * (f_s - 1.0)
    x = np.clip(x, 0.0, 255.0)
    return GrayImage(np.floor(x + 0.5).astype(np.uint16), depth=8)


def photometric_jitter(img: GrayImage, rng, cfg: AugmentConfig):
    """Photometric jitter with factors drawn from [1-half_range, 1+half_range]."""
    f_b = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness)
    f_c = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast)
    f_s = rng.uniform(1.0 - cfg.sharpness, 1.0 + cfg.sharpness)
    return apply_photometric(img, f_b, f_c, f_s)


def geometric_jitter(img: GrayImage, masks, rng, cfg: AugmentConfig):
    """Rotation, optional horizontal flip, and edge crop re-squared at center.

    The image and every mask receive identical transform parameters; the
    input must be square and the output is square (possibly smaller).
    """
    if img.width != img.height:
        raise ValueError("geometric jitter expects a square input")
    angle = rng.uniform(-cfg.rotation_max, cfg.rotation_max)
    do_flip = bool(cfg.flip and rng.random() < 0.5)
    max_inset = int(cfg.crop_max_frac * img.width)
    left, right, top, bottom = (int(v) for v in rng.integers(0, max_inset + 1, size=4))

    if angle != 0.0:
        # one source grid serves the image and every mask
        sy, sx = _inverse_rotation_grid(img.height, img.width, angle)
        out = _sample_bilinear(img.data, sy, sx)
        out_img = GrayImage(np.floor(out + 0.5).astype(np.uint16), depth=img.depth)
        yi, xi = _nearest_lookup(img.height, img.width, sy, sx)
        out_masks = [BinaryMask(m.data[yi, xi]) for m in masks]
    else:
        out_img = GrayImage(img.data.copy(), depth=img.depth)
        out_masks = [BinaryMask(m.data.copy()) for m in masks]
    if do_flip:
        out_img = _flip_h(out_img)
        out_masks = [_flip_h(m) for m in out_masks]
    if left or right or top or bottom:
        out_img = GrayImage(
            _crop_square(out_img.data, left, right, top, bottom).copy(), depth=img.depth
        )
        out_masks = [
            BinaryMask(_crop_square(m.data, left, right, top, bottom).copy())
            for m in out_masks
        ]
    return out_img, tuple(out_masks)


def random_scale_batch(batch: Batch, rng, cfg: AugmentConfig):
    """Resize every batch item to one square size drawn from the scale set."""
    target = cfg.scales()[int(rng.integers(0, len(cfg.scales())))]
    images = [resample(img, target, target, mode="bilinear") for img in batch.images]
    masks = [
        tuple(resample_mask(m, target, target) for m in pair) for pair in batch.masks
    ]
    return Batch(images, masks)


def augment_pipeline(batch: Batch, rng, cfg: AugmentConfig):
    """Geometric jitter, photometric jitter, then the per-batch random scale."""
    images, masks = [], []
    for img, pair in zip(batch.images, batch.masks):
        g_img, g_masks = geometric_jitter(img, pair, rng, cfg)
        images.append(photometric_jitter(g_img, rng, cfg))
        masks.append(g_masks)
    target = cfg.scales()[int(rng.integers(0, len(cfg.scales())))]
    images = [resample(img, target, target, mode="bilinear") for img in images]
    masks = [tuple(resample_mask(m, target, target) for m in pair) for pair in masks]
    return Batch(images, masks)


def resize_eval(img: GrayImage, masks, size):
    """Evaluation path: no jitter, one fixed square size (bilinear / nearest)."""
    out_img = resample(img, size, size, mode="bilinear")
    out_masks = tuple(resample_mask(m, size, size) for m in masks)
    return out_img, out_masks
