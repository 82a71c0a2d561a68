"""Seeded generator of desk-scale synthetic datasets.

Each sample is a 12-bit slice holding an annular "rectum" (dark lumen,
bright wall), a tumor sector grown along the wall (thickened inward or
bulging outward), and, with configurable probability, a rectum-like
distractor ellipse elsewhere in the image. Slices of one patient share
geometry up to a small rotation and center shift, so per-patient intensity
windowing has something to do. Generation is a pure function of
(config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imgcore import BinaryMask, GrayImage, Manifest, load_manifest, save_pnm

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    n_patients: int = 60
    slices_per_patient: int = 2
    depth: int = 12
    ring_radius: tuple = (9.0, 14.0)
    ring_thickness: tuple = (2.5, 4.0)
    tumor_extent_deg: tuple = (60.0, 130.0)
    bulge_prob: float = 0.5
    bulge_max: float = 2.0
    distractor_prob: float = 0.5
    noise_std: float = 140.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if self.depth != 12:
            raise ValueError("generator emits 12-bit images")
        reach = self.ring_radius[1] + self.bulge_max + 3 + 2  # shift + margin
        if reach > self.image_size / 2:
            raise ValueError("ring geometry does not fit inside the image")
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise ValueError("distractor_prob must lie in [0,1]")


@dataclass
class SynthSample:
    image: GrayImage
    rectum: BinaryMask
    tumor: BinaryMask
    patient: str


# intensity levels before per-patient jitter and noise (12-bit scale)
_LEVELS = {"background": 500.0, "lumen": 1100.0, "wall": 2600.0, "tumor": 1800.0}


def dilate(mask: BinaryMask, k):
    """Chebyshev dilation by k pixels (k iterations of the 3x3 box)."""
    out = mask.data.astype(bool)
    h, w = out.shape
    for _ in range(k):
        p = np.zeros((h + 2, w + 2), dtype=bool)
        p[1:-1, 1:-1] = out
        acc = np.zeros_like(out)
        for dy in range(3):
            for dx in range(3):
                acc |= p[dy : dy + h, dx : dx + w]
        out = acc
    return BinaryMask(out.astype(np.uint8))


def _patient_geometry(cfg: SynthConfig, rng):
    half = cfg.image_size / 2.0
    geom = {
        "cy": half + rng.uniform(-3, 3),
        "cx": half + rng.uniform(-3, 3),
        "r_out": rng.uniform(*cfg.ring_radius),
        "thick": rng.uniform(*cfg.ring_thickness),
        "phi0": rng.uniform(0, TWO_PI),
        "extent": np.deg2rad(rng.uniform(*cfg.tumor_extent_deg)),
        "bulging": bool(rng.random() < cfg.bulge_prob),
        "inward": rng.uniform(1.0, 2.5),
        "bulge": rng.uniform(1.0, cfg.bulge_max),
        "levels": {k: v * rng.uniform(0.9, 1.1) for k, v in _LEVELS.items()},
        "has_distractor": bool(rng.random() < cfg.distractor_prob),
    }
    geom["distractor"] = _place_distractor(cfg, geom, rng) if geom["has_distractor"] else None
    return geom


def _place_distractor(cfg, geom, rng):
    """Rectum-like ellipse kept clear of the rectum disk; None if no spot fits."""
    a = rng.uniform(5.0, 8.0)
    b = rng.uniform(3.5, 6.0)
    tilt = rng.uniform(0, np.pi)
    rim = rng.uniform(2.0, 3.0)
    margin = a + 3 + 2  # ellipse reach + image margin + per-slice shift
    clearance = geom["r_out"] + cfg.bulge_max + a + 2
    for _ in range(60):
        psi = rng.uniform(0, TWO_PI)
        dist = rng.uniform(clearance, clearance + 12)
        dy = geom["cy"] + dist * np.sin(psi)
        dx = geom["cx"] + dist * np.cos(psi)
        if margin <= dy <= cfg.image_size - margin and margin <= dx <= cfg.image_size - margin:
            return {"cy": dy, "cx": dx, "a": a, "b": b, "tilt": tilt, "rim": rim}
    return None


def _render_slice(cfg: SynthConfig, geom, rng, patient):
    # per-slice jitter: the geometry rotates a little and shifts a little
    dphi = np.deg2rad(rng.uniform(-5, 5))
    sy = rng.uniform(-2, 2)
    sx = rng.uniform(-2, 2)
    n = cfg.image_size
    yy, xx = np.mgrid[:n, :n].astype(np.float64)

    cy, cx = geom["cy"] + sy, geom["cx"] + sx
    rho = np.hypot(yy - cy, xx - cx)
    theta = np.mod(np.arctan2(yy - cy, xx - cx), TWO_PI)

    r_out, thick = geom["r_out"], geom["thick"]
    disk = rho <= r_out
    lumen = rho <= r_out - thick
    wall = disk & ~lumen

    in_sector = np.mod(theta - (geom["phi0"] + dphi), TWO_PI) <= geom["extent"]
    if geom["bulging"]:
        band = (rho >= r_out - thick) & (rho <= r_out + geom["bulge"])
    else:
        band = (rho >= r_out - thick - geom["inward"]) & (rho <= r_out)
    rectum_mask = BinaryMask(disk.astype(np.uint8))
    tumor_raw = in_sector & band
    # the tumor never strays more than two pixels from the rectum
    tumor = tumor_raw & (dilate(rectum_mask, 2).data == 1)
    if not tumor.any():
        raise ValueError("configured geometry produced an empty tumor")

    lv = geom["levels"]
    img = np.full((n, n), lv["background"])
    img[lumen] = lv["lumen"]
    img[wall] = lv["wall"]
    img[tumor] = lv["tumor"]

    d = geom["distractor"]
    if d is not None:
        dyy = yy - (d["cy"] + sy)
        dxx = xx - (d["cx"] + sx)
        tilt = d["tilt"] + dphi
        u = dxx * np.cos(tilt) + dyy * np.sin(tilt)
        v = -dxx * np.sin(tilt) + dyy * np.cos(tilt)
        outer = (u / d["a"]) ** 2 + (v / d["b"]) ** 2 <= 1.0
        ai, bi = max(d["a"] - d["rim"], 1.0), max(d["b"] - d["rim"], 1.0)
        inner = (u / ai) ** 2 + (v / bi) ** 2 <= 1.0
        img[inner] = lv["lumen"]
        img[outer & ~inner] = lv["wall"]

    img = img + rng.normal(0.0, cfg.noise_std, size=(n, n))
    img = np.clip(np.floor(img + 0.5), 0, 4095).astype(np.uint16)
    return SynthSample(
        image=GrayImage(img, depth=cfg.depth),
        rectum=rectum_mask,
        tumor=BinaryMask(tumor.astype(np.uint8)),
        patient=patient,
    )


def gen_sample(cfg: SynthConfig, rng):
    """One sample from a freshly drawn patient geometry."""
    geom = _patient_geometry(cfg, rng)
    return _render_slice(cfg, geom, rng, patient="adhoc")


def gen_dataset(cfg: SynthConfig, out_dir):
    """Write the full dataset tree and return its manifest.

    Layout: images/, masks_rectum/, masks_tumor/, manifest.jsonl. Re-running
    with the same config and seed reproduces every byte.
    """
    out = Path(out_dir)
    for sub in ("images", "masks_rectum", "masks_tumor"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(cfg.n_patients):
        patient = f"p{i:03d}"
        rng = np.random.default_rng([cfg.seed, i])
        geom = _patient_geometry(cfg, rng)
        for j in range(cfg.slices_per_patient):
            sample = _render_slice(cfg, geom, rng, patient)
            sid = f"{patient}_s{j}"
            save_pnm(sample.image, out / "images" / f"{sid}.pgm")
            save_pnm(sample.rectum, out / "masks_rectum" / f"{sid}.pgm")
            save_pnm(sample.tumor, out / "masks_tumor" / f"{sid}.pgm")
            lines.append(
                json.dumps(
                    {
                        "id": sid,
                        "patient": patient,
                        "image": f"images/{sid}.pgm",
                        "rectum_mask": f"masks_rectum/{sid}.pgm",
                        "tumor_mask": f"masks_tumor/{sid}.pgm",
                    }
                )
            )
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return load_manifest(out / "manifest.jsonl")
