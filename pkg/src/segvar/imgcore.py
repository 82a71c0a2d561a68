"""Raster value types, resampling, cropping, and bit-exact PNM / manifest I/O.

Everything downstream (preprocessing, training, decomposition, rendering)
moves data through the types defined here. All operations are pure: inputs
are never mutated, so values can be shared read-only across workers.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ManifestError, PnmError

DEPTH_MAXVAL = {8: 255, 12: 4095, 16: 65535}
MAXVAL_DEPTH = {255: 8, 4095: 12, 65535: 16}


@dataclass
class GrayImage:
    """2-D scalar intensity raster; depth is bits per sample (8, 12, or 16)."""

    data: np.ndarray
    depth: int = 8

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.size == 0:
            raise ValueError("image data must be a nonempty 2-D array")
        if self.depth not in DEPTH_MAXVAL:
            raise ValueError(f"unsupported depth {self.depth}, expected 8, 12, or 16")
        if self.data.min() < 0 or self.data.max() > DEPTH_MAXVAL[self.depth]:
            raise ValueError(f"intensity out of range for {self.depth}-bit image")
        self.data = self.data.astype(np.uint16)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


@dataclass
class BinaryMask:
    """2-D {0,1} raster: ground truth, prediction, ROI indicator, or bias map."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.size == 0:
            raise ValueError("mask data must be a nonempty 2-D array")
        if not ((self.data == 0) | (self.data == 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.data = self.data.astype(np.uint8)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


@dataclass
class ValueMap:
    """2-D raster of values in [0,1]; used for variance and expected-loss maps."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.size == 0:
            raise ValueError("value map must be a nonempty 2-D array")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("value map entries must lie in [0,1]")

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


@dataclass
class ColorImage:
    """8-bit RGB raster, the output of map/contour rendering."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != 3 or self.data.size == 0:
            raise ValueError("color data must be a nonempty HxWx3 array")
        if self.data.min() < 0 or self.data.max() > 255:
            raise ValueError("color channels must lie in [0,255]")
        self.data = self.data.astype(np.uint8)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned pixel box: top-left corner plus extent."""

    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1 or self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"degenerate box {self}")


@dataclass(frozen=True)
class SampleRecord:
    """One dataset entry: an image plus its rectum and tumor masks."""

    id: str
    patient: str
    image: str
    rectum_mask: str
    tumor_mask: str


@dataclass
class Manifest:
    """Ordered list of sample records; `root` is the directory paths resolve against."""

    records: list[SampleRecord]
    root: Path | None = None

    def __post_init__(self):
        if not self.records:
            raise ManifestError("manifest holds no records")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate sample ids: {dupes}")

    def ids(self):
        return [r.id for r in self.records]

    def by_id(self, sample_id):
        for r in self.records:
            if r.id == sample_id:
                return r
        raise KeyError(sample_id)

    def resolve(self, rel_path):
        p = Path(rel_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p


# ---------------------------------------------------------------------------
# PNM I/O (binary PGM for gray/mask data, binary PPM for rendered color)
# ---------------------------------------------------------------------------


def _parse_pnm_header(buf):
    """Return (magic, width, height, maxval, payload_offset) of a P5/P6 buffer."""
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i : i + 1].isspace():
            i += 1
        if start == i:
            raise PnmError("truncated PNM header")
        tokens.append(buf[start:i])
    magic = tokens[0].decode("ascii", "replace")
    if magic not in ("P5", "P6"):
        raise PnmError(f"bad magic number {magic!r}, expected P5 or P6")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PnmError(f"non-numeric PNM header field: {exc}") from exc
    if w < 1 or h < 1:
        raise PnmError(f"bad PNM dimensions {w}x{h}")
    # exactly one whitespace byte separates the header from the raster
    return magic, w, h, maxval, i + 1


def load_pnm(path):
    """Load a binary PGM/PPM file.

    P5 with maxval 1 loads as a BinaryMask; maxval 255/4095/65535 load as
    GrayImage of depth 8/12/16 (two-byte big-endian samples above 255).
    P6 with maxval 255 loads as a ColorImage.
    """
    buf = Path(path).read_bytes()
    magic, w, h, maxval, off = _parse_pnm_header(buf)
    if magic == "P6":
        if maxval != 255:
            raise PnmError(f"unsupported PPM maxval {maxval}")
        n = w * h * 3
        if len(buf) - off < n:
            raise PnmError(f"truncated PPM payload in {path}")
        data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off)
        return ColorImage(data.reshape(h, w, 3))
    if maxval == 1:
        n = w * h
        if len(buf) - off < n:
            raise PnmError(f"truncated PGM payload in {path}")
        data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off)
        if data.max(initial=0) > 1:
            raise PnmError("mask sample exceeds maxval 1")
        return BinaryMask(data.reshape(h, w))
    if maxval not in MAXVAL_DEPTH:
        raise PnmError(f"unsupported PGM maxval {maxval}")
    depth = MAXVAL_DEPTH[maxval]
    if maxval > 255:
        n = w * h
        if len(buf) - off < 2 * n:
            raise PnmError(f"truncated PGM payload in {path}")
        data = np.frombuffer(buf, dtype=">u2", count=n, offset=off).astype(np.uint16)
    else:
        n = w * h
        if len(buf) - off < n:
            raise PnmError(f"truncated PGM payload in {path}")
        data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).astype(np.uint16)
    return GrayImage(data.reshape(h, w), depth=depth)


def save_pnm(img, path):
    """Write a raster as binary PGM/PPM; load_pnm(save_pnm(x)) is bit-exact."""
    path = Path(path)
    if isinstance(img, ColorImage):
        header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
        payload = img.data.tobytes()
    elif isinstance(img, BinaryMask):
        header = f"P5\n{img.width} {img.height}\n1\n".encode("ascii")
        payload = img.data.tobytes()
    elif isinstance(img, GrayImage):
        maxval = DEPTH_MAXVAL[img.depth]
        header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
        if maxval > 255:
            payload = img.data.astype(">u2").tobytes()
        else:
            payload = img.data.astype(np.uint8).tobytes()
    else:
        raise TypeError(f"cannot save {type(img).__name__} as PNM")
    try:
        path.write_bytes(header + payload)
    except OSError as exc:
        raise PnmError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Resampling and cropping
# ---------------------------------------------------------------------------


def _nearest_indices(n_dst, n_src):
    # floor of the half-pixel-centered source coordinate
    idx = np.floor((np.arange(n_dst) + 0.5) * (n_src / n_dst)).astype(np.intp)
    return np.clip(idx, 0, n_src - 1)


def _bilinear_axis(n_dst, n_src):
    """Per-axis sample positions: (lower index, upper index, upper weight)."""
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    i0 = np.clip(lo.astype(np.intp), 0, n_src - 1)
    i1 = np.clip(i0 + 1, 0, n_src - 1)
    # clamp the index, not the weight: out-of-range rows collapse to the edge sample
    i1 = np.where(lo < 0, i0, i1)
    return i0, i1, frac


def resample(img: GrayImage, new_w, new_h, mode="bilinear"):
    """Resize an image with half-pixel-centered, edge-clamped sampling."""
    if new_w < 1 or new_h < 1:
        raise ValueError(f"bad target size {new_w}x{new_h}")
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown resample mode {mode!r}")
    if mode == "nearest":
        yi = _nearest_indices(new_h, img.height)
        xi = _nearest_indices(new_w, img.width)
        return GrayImage(img.data[np.ix_(yi, xi)], depth=img.depth)
    y0, y1, fy = _bilinear_axis(new_h, img.height)
    x0, x1, fx = _bilinear_axis(new_w, img.width)
    d = img.data.astype(np.float64)
    top = d[np.ix_(y0, x0)] * (1 - fx) + d[np.ix_(y0, x1)] * fx
    bot = d[np.ix_(y1, x0)] * (1 - fx) + d[np.ix_(y1, x1)] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return GrayImage(np.floor(out + 0.5).astype(np.uint16), depth=img.depth)


def resample_mask(mask: BinaryMask, new_w, new_h):
    """Nearest-neighbor mask resize; values stay binary."""
    if new_w < 1 or new_h < 1:
        raise ValueError(f"bad target size {new_w}x{new_h}")
    yi = _nearest_indices(new_h, mask.height)
    xi = _nearest_indices(new_w, mask.width)
    return BinaryMask(mask.data[np.ix_(yi, xi)])


def crop(raster, box: RoiBox):
    """Extract the exact sub-raster under `box`; the box must lie inside."""
    if box.x0 + box.w > raster.width or box.y0 + box.h > raster.height:
        raise ValueError(
            f"box {box} exceeds raster {raster.width}x{raster.height}"
        )
    sub = raster.data[box.y0 : box.y0 + box.h, box.x0 : box.x0 + box.w]
    return dataclasses.replace(raster, data=sub.copy())


# ---------------------------------------------------------------------------
# Manifest I/O (JSON lines, one record per line)
# ---------------------------------------------------------------------------

_MANIFEST_KEYS = ("id", "patient", "image", "rectum_mask", "tumor_mask")


def load_manifest(path):
    """Read a JSON-lines manifest; file order is preserved."""
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: bad JSON: {exc}") from exc
        missing = [k for k in _MANIFEST_KEYS if k not in obj]
        if missing:
            raise ManifestError(f"{path}:{lineno}: missing keys {missing}")
        records.append(SampleRecord(**{k: str(obj[k]) for k in _MANIFEST_KEYS}))
    if not records:
        raise ManifestError(f"{path}: empty manifest")
    return Manifest(records, root=path.parent)


def save_manifest(manifest: Manifest, path):
    """Write a manifest as JSON lines; load_manifest round-trips it."""
    lines = []
    for r in manifest.records:
        obj = {k: getattr(r, k) for k in _MANIFEST_KEYS}
        lines.append(json.dumps(obj))
    Path(path).write_text("\n".join(lines) + "\n")
