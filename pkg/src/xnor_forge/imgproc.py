"""GTSRB ingestion and preprocessing.

Pipeline per sample: decode PPM, crop the annotated ROI and resample it to
32x32 (bilinear), run CLAHE on the luma plane of full-range BT.601 YCbCr,
convert back to RGB, and finally scale to the network's input range.
Class balancing synthesizes extra samples with seeded affine warps.

Preprocessed cache (``records.bin`` inside a cache directory), little-endian::

    magic    8 bytes  b"XNORIMG1"
    version  u16      1
    count    u32
    height, width, channels   u16 each
    per record:
      label      u8   class id
      augmented  u8   1 for synthesized samples
      source     u32  index of the source image within its class
      pixels     u8 * channels*height*width, channel-planar (C, H, W)
    crc32    u32      of every preceding byte
"""
from __future__ import annotations

import csv
import io
import math
import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .netspec import InputRange

NUM_CLASSES = 43
TARGET_SIZE = (32, 32)
BALANCE_TARGET = 10000

CLAHE_TILES = (8, 8)
CLAHE_CLIP = 2.0

ROTATION_RANGE = (-10.0, 10.0)
TRANSLATION_RANGE = (-0.1, 0.1)
SHEAR_RANGE = (-10.0, 10.0)
SCALE_RANGE = (0.9, 1.1)


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RgbImage:
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ImageFormatError(f"expected (H, W, 3) pixels, got {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, RgbImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


# -- PPM ---------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def load_ppm(data: bytes) -> RgbImage:
    """Decode a binary (P6) PPM with maxval 255."""
    data = bytes(data)
    pos = 0
    fields = []
    for _ in range(4):
        m = _PPM_TOKEN.match(data, pos)
        if m is None:
            raise ImageFormatError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ImageFormatError(f"bad PPM magic {fields[0][:8]!r}; only binary P6 is supported")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError("non-numeric PPM header field") from None
    if maxval != 255:
        raise ImageFormatError(f"PPM maxval {maxval} unsupported (need 255)")
    if width < 1 or height < 1:
        raise ImageFormatError(f"bad PPM size {width}x{height}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("truncated PPM header")
    pos += 1  # single whitespace byte before the raster
    need = 3 * width * height
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise ImageFormatError(f"truncated PPM payload: {len(raster)} of {need} bytes")
    return RgbImage(np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3))


def save_ppm(img: RgbImage) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode("ascii") + img.pixels.tobytes()


# -- annotations -------------------------------------------------------

@dataclass(frozen=True)
class Annotation:
    filename: str
    class_id: int
    roi: tuple[int, int, int, int]  # x1, y1, x2, y2; x2/y2 exclusive
    width: int = 0
    height: int = 0


class AnnotationError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


_CSV_FIELDS = ("Filename", "Width", "Height", "Roi.X1", "Roi.Y1", "Roi.X2", "Roi.Y2", "ClassId")


def parse_annotations(text: str, errors: Optional[list] = None) -> list[Annotation]:
    """Parse a GTSRB ``GT-*.csv`` sidecar (semicolon separated, header row).

    Bad rows raise :class:`AnnotationError`, unless an ``errors`` list is
    passed, in which case they are appended to it and skipped.
    """
    rows = list(csv.reader(io.StringIO(text), delimiter=";"))
    if not rows:
        return []
    header = [h.strip() for h in rows[0]]
    try:
        cols = [header.index(f) for f in _CSV_FIELDS]
    except ValueError:
        raise AnnotationError(1, f"header must contain {';'.join(_CSV_FIELDS)}") from None
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            out.append(_annotation_row(lineno, row, cols))
        except AnnotationError as exc:
            if errors is None:
                raise
            errors.append(exc)
    return out


def _annotation_row(lineno: int, row: list, cols: list) -> Annotation:
    try:
        vals = [row[c].strip() for c in cols]
        w, h, x1, y1, x2, y2, cid = (int(v) for v in vals[1:])
    except (IndexError, ValueError):
        raise AnnotationError(lineno, f"malformed row {';'.join(row)!r}") from None
    if not 0 <= cid < NUM_CLASSES:
        raise AnnotationError(lineno, f"class id {cid} outside 0..{NUM_CLASSES - 1}")
    if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
        raise AnnotationError(lineno, f"ROI ({x1},{y1},{x2},{y2}) invalid for {w}x{h} image")
    return Annotation(vals[0], cid, (x1, y1, x2, y2), w, h)


# -- resampling --------------------------------------------------------

def _round_u8(x: np.ndarray) -> np.ndarray:
    """Round half up and saturate to uint8."""
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def _sample_axis(n_in: int, n_out: int):
    """Source indices and weights for half-pixel-centre bilinear resampling."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an ``(H, W, C)`` array; float64 result, unrounded."""
    a = np.asarray(arr, dtype=np.float64)
    y0, y1, wy = _sample_axis(a.shape[0], out_h)
    x0, x1, wx = _sample_axis(a.shape[1], out_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def crop_resize(img: RgbImage, roi=None, target=TARGET_SIZE) -> RgbImage:
    """Crop ``roi = (x1, y1, x2, y2)`` (ends exclusive) and resample to ``target``."""
    if roi is None:
        roi = (0, 0, img.width, img.height)
    x1, y1, x2, y2 = roi
    if not (0 <= x1 < x2 <= img.width and 0 <= y1 < y2 <= img.height):
        raise ValueError(f"ROI {roi} outside {img.width}x{img.height} image")
    crop = img.pixels[y1:y2, x1:x2]
    th, tw = target
    if crop.shape[:2] == (th, tw):
        return RgbImage(crop.copy())
    return RgbImage(_round_u8(resize_bilinear(crop, th, tw)))


# -- colour ------------------------------------------------------------

def rgb_to_ycbcr(img: RgbImage) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-range BT.601 (JPEG) conversion; three uint8 planes."""
    p = img.pixels.astype(np.float64)
    r, g, b = p[..., 0], p[..., 1], p[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return _round_u8(y), _round_u8(cb), _round_u8(cr)


def ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> RgbImage:
    y = np.asarray(y, dtype=np.float64)
    cb = np.asarray(cb, dtype=np.float64) - 128.0
    cr = np.asarray(cr, dtype=np.float64) - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return RgbImage(_round_u8(np.stack([r, g, b], axis=-1)))


# -- CLAHE -------------------------------------------------------------

def clip_histogram(hist: np.ndarray, limit: float) -> np.ndarray:
    """Clip bins at ``limit`` and spread the excess evenly without re-exceeding it.

    The excess is water-filled: every bin is raised by the same amount until
    it reaches ``limit``, so the result sums to the input total and no bin
    ends above ``limit`` (given ``limit * bins >= total``).
    """
    h = np.asarray(hist, dtype=np.float64)
    if not math.isfinite(limit):
        return h.copy()
    clipped = np.minimum(h, limit)
    excess = h.sum() - clipped.sum()
    if excess <= 0:
        return clipped
    rooms = np.sort(limit - clipped)
    level = 0.0
    delta = rooms[-1]
    for k, room in enumerate(rooms):
        open_bins = rooms.size - k
        need = (room - level) * open_bins
        if need >= excess:
            delta = level + excess / open_bins
            break
        excess -= need
        level = room
    return np.minimum(limit, clipped + delta)


def equalization_lut(hist: np.ndarray) -> np.ndarray:
    """``round(255 * (cdf - cdf_min) / (total - cdf_min))`` as a 256-entry LUT.

    A histogram with a single occupied bin has nothing to stretch and maps
    through unchanged.
    """
    h = np.asarray(hist, dtype=np.float64)
    cdf = np.cumsum(h)
    total = cdf[-1]
    occupied = np.flatnonzero(h > 0)
    if occupied.size <= 1:
        return np.arange(256, dtype=np.uint8)
    cdf_min = cdf[occupied[0]]
    return _round_u8(255.0 * (cdf - cdf_min) / (total - cdf_min))


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return (np.arange(tiles + 1) * n) // tiles


def _check_tiles(plane: np.ndarray, tiles) -> tuple[int, int]:
    tx, ty = tiles
    h, w = plane.shape
    if tx < 1 or ty < 1:
        raise ValueError(f"tile grid must be at least 1x1, got {tiles}")
    if tx > w or ty > h:
        raise ValueError(f"{tx}x{ty} tiles on a {w}x{h} plane leaves tiles under one pixel")
    return tx, ty


def clahe_tile_histograms(plane: np.ndarray, tiles=CLAHE_TILES, clip_limit=CLAHE_CLIP):
    """Yield ``(tile_pixels, raw_hist, clipped_hist)`` for every tile, row-major."""
    plane = np.asarray(plane, dtype=np.uint8)
    tx, ty = _check_tiles(plane, tiles)
    ey, ex = _tile_edges(plane.shape[0], ty), _tile_edges(plane.shape[1], tx)
    for i in range(ty):
        for j in range(tx):
            tile = plane[ey[i]:ey[i + 1], ex[j]:ex[j + 1]]
            raw = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            limit = clip_limit * tile.size / 256.0
            yield tile.size, raw, clip_histogram(raw, limit)


def _interp_axis(n: int, edges: np.ndarray):
    centres = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(n, dtype=np.float64)
    k = np.searchsorted(centres, pos, side="right") - 1
    k0 = np.clip(k, 0, centres.size - 1)
    k1 = np.clip(k + 1, 0, centres.size - 1)
    span = centres[k1] - centres[k0]
    wgt = np.where(span > 0, (pos - centres[k0]) / np.where(span > 0, span, 1.0), 0.0)
    return k0, k1, np.clip(wgt, 0.0, 1.0)


def clahe(plane: np.ndarray, tiles=CLAHE_TILES, clip_limit: float = CLAHE_CLIP) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of one 8-bit plane.

    ``tiles`` is ``(columns, rows)``. Each tile's histogram is clipped at
    ``clip_limit * tile_pixels / 256`` (``math.inf`` disables clipping), the
    excess is redistributed, and per-pixel results blend the four nearest
    tile mappings bilinearly between tile centres.
    """
    plane = np.asarray(plane, dtype=np.uint8)
    if plane.ndim != 2:
        raise ValueError("clahe expects a single 2-D plane")
    if not clip_limit >= 1:
        raise ValueError(f"clip limit must be >= 1, got {clip_limit}")
    tx, ty = _check_tiles(plane, tiles)
    luts = np.empty((ty, tx, 256), dtype=np.float64)
    for n, (_, raw, clipped) in enumerate(clahe_tile_histograms(plane, tiles, clip_limit)):
        i, j = divmod(n, tx)
        if np.count_nonzero(raw) <= 1:
            luts[i, j] = np.arange(256)
        else:
            luts[i, j] = equalization_lut(clipped)
    h, w = plane.shape
    r0, r1, wr = _interp_axis(h, _tile_edges(h, ty))
    c0, c1, wc = _interp_axis(w, _tile_edges(w, tx))
    wr, wc = wr[:, None], wc[None, :]
    v = plane
    top = luts[r0[:, None], c0[None, :], v] * (1 - wc) + luts[r0[:, None], c1[None, :], v] * wc
    bot = luts[r1[:, None], c0[None, :], v] * (1 - wc) + luts[r1[:, None], c1[None, :], v] * wc
    return _round_u8(top * (1 - wr) + bot * wr)


def clahe_rgb(img: RgbImage, tiles=CLAHE_TILES, clip_limit: float = CLAHE_CLIP) -> RgbImage:
    """CLAHE on the luma plane only; chroma passes through."""
    y, cb, cr = rgb_to_ycbcr(img)
    return ycbcr_to_rgb(clahe(y, tiles, clip_limit), cb, cr)


# -- augmentation ------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    rotation: float = 0.0  # degrees
    translation: tuple[float, float] = (0.0, 0.0)  # fraction of width, height
    shear: float = 0.0  # degrees
    scale: float = 1.0
    seed: Optional[int] = None

    def check(self) -> None:
        problems = []
        if not ROTATION_RANGE[0] <= self.rotation <= ROTATION_RANGE[1]:
            problems.append(f"rotation {self.rotation} outside {ROTATION_RANGE}")
        for t in self.translation:
            if not TRANSLATION_RANGE[0] <= t <= TRANSLATION_RANGE[1]:
                problems.append(f"translation {t} outside {TRANSLATION_RANGE}")
        if not SHEAR_RANGE[0] <= self.shear <= SHEAR_RANGE[1]:
            problems.append(f"shear {self.shear} outside {SHEAR_RANGE}")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            problems.append(f"scale {self.scale} outside {SCALE_RANGE}")
        if problems:
            raise ValueError("; ".join(problems))


def draw_augment_params(seed: int, class_id: int, index: int) -> AugmentParams:
    """Parameters for the ``index``-th synthetic sample of a class.

    Each ``(seed, class, index)`` gets its own PCG64 stream, so the draw does
    not depend on processing order.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, class_id, index])))
    return AugmentParams(
        rotation=float(rng.uniform(*ROTATION_RANGE)),
        translation=(float(rng.uniform(*TRANSLATION_RANGE)), float(rng.uniform(*TRANSLATION_RANGE))),
        shear=float(rng.uniform(*SHEAR_RANGE)),
        scale=float(rng.uniform(*SCALE_RANGE)),
        seed=seed,
    )


def _affine_matrix(params: AugmentParams) -> np.ndarray:
    th = math.radians(params.rotation)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    shear = np.array([[1.0, math.tan(math.radians(params.shear))], [0.0, 1.0]])
    return params.scale * rot @ shear


def augment(img: RgbImage, params: AugmentParams, *, check_ranges: bool = True) -> RgbImage:
    """Warp with ``scale * rotation * shear`` about the centre, then translate.

    Sampling is bilinear with edge replication outside the image.
    """
    if check_ranges:
        params.check()
    h, w = img.height, img.width
    m = _affine_matrix(params)
    inv = np.linalg.inv(m)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    tx, ty = params.translation[0] * w, params.translation[1] * h
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx - tx, yy - cy - ty
    sx = np.clip(inv[0, 0] * dx + inv[0, 1] * dy + cx, 0.0, w - 1)
    sy = np.clip(inv[1, 0] * dx + inv[1, 1] * dy + cy, 0.0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    p = img.pixels.astype(np.float64)
    top = p[y0, x0] * (1 - fx) + p[y0, x1] * fx
    bot = p[y1, x0] * (1 - fx) + p[y1, x1] * fx
    return RgbImage(_round_u8(top * (1 - fy) + bot * fy))


def balance_plan(class_counts, target: int = BALANCE_TARGET) -> dict[int, int]:
    """Number of synthetic samples per class to reach ``target`` examples each.

    ``class_counts`` maps class id to count (a sequence is indexed by class).
    Classes already at or above the target get zero.
    """
    if not isinstance(class_counts, dict):
        class_counts = dict(enumerate(class_counts))
    if target < 1:
        raise ValueError("balance target must be positive")
    plan = {}
    for cid, n in sorted(class_counts.items()):
        if n < 1:
            raise ValueError(f"class {cid} has no examples to augment from")
        plan[cid] = max(0, target - n)
    return plan


def augment_schedule(class_id: int, n_sources: int, n_extra: int, seed: int):
    """``(source index, params)`` for each synthetic sample, round-robin over sources."""
    for k in range(n_extra):
        yield k % n_sources, draw_augment_params(seed, class_id, k)


# -- normalization and the full pipeline -------------------------------

def normalize(img: RgbImage, input_range: InputRange) -> np.ndarray:
    v = img.pixels.astype(np.float64)
    if input_range is InputRange.SYMMETRIC_UNIT:
        return v / 127.5 - 1.0
    return v / 255.0


def preprocess(img: RgbImage, roi=None, tiles=CLAHE_TILES, clip_limit: float = CLAHE_CLIP) -> RgbImage:
    """Crop/resize to 32x32, then luma CLAHE."""
    return clahe_rgb(crop_resize(img, roi), tiles, clip_limit)


# -- cache -------------------------------------------------------------

CACHE_MAGIC = b"XNORIMG1"
CACHE_FILE = "records.bin"
_CACHE_HEADER = 8 + struct.calcsize("<HIHHH")


@dataclass(frozen=True, eq=False)
class CacheRecord:
    label: int
    image: RgbImage
    augmented: bool = False
    source: int = 0


def encode_cache(records: Sequence[CacheRecord], size=TARGET_SIZE) -> bytes:
    h, w = size
    out = io.BytesIO()
    out.write(CACHE_MAGIC)
    out.write(struct.pack("<HIHHH", 1, len(records), h, w, 3))
    for rec in records:
        if rec.image.pixels.shape != (h, w, 3):
            raise ValueError(f"cache record has shape {rec.image.pixels.shape}, expected {(h, w, 3)}")
        out.write(struct.pack("<BBI", rec.label, int(rec.augmented), rec.source))
        out.write(rec.image.pixels.transpose(2, 0, 1).tobytes())
    payload = out.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def decode_cache(data: bytes) -> list[CacheRecord]:
    if data[:8] != CACHE_MAGIC:
        raise ImageFormatError("bad cache magic")
    if len(data) < 24:
        raise ImageFormatError("truncated cache")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ImageFormatError("cache checksum mismatch")
    version, count, h, w, c = struct.unpack_from("<HIHHH", payload, 8)
    if version != 1:
        raise ImageFormatError(f"unsupported cache version {version}")
    rec_size = 6 + h * w * c
    if len(payload) != _CACHE_HEADER + count * rec_size:
        raise ImageFormatError("cache length does not match record count")
    out = []
    pos = _CACHE_HEADER
    for _ in range(count):
        label, aug, src = struct.unpack_from("<BBI", payload, pos)
        px = np.frombuffer(payload, dtype=np.uint8, count=h * w * c, offset=pos + 6)
        out.append(CacheRecord(label, RgbImage(px.reshape(c, h, w).transpose(1, 2, 0)), bool(aug), src))
        pos += rec_size
    return out


def write_cache(directory, records: Sequence[CacheRecord]) -> Path:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    target = path / CACHE_FILE
    target.write_bytes(encode_cache(records))
    return target


def read_cache(directory) -> list[CacheRecord]:
    return decode_cache((Path(directory) / CACHE_FILE).read_bytes())


def find_annotation_files(root) -> list[Path]:
    """All ``GT-*.csv`` sidecars below ``root`` in sorted order."""
    return sorted(Path(root).rglob("GT-*.csv"))


def class_counts(annotations: Iterable[Annotation]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for a in annotations:
        counts[a.class_id] = counts.get(a.class_id, 0) + 1
    return counts
