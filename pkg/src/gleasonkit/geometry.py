"""Tissue masks, dual-resolution patch planning and core assignment.

Coordinates of :class:`PatchRef` and :class:`CoreAnnotation` polygons are
base-resolution (level 0) slide pixels. Masks live at their own, coarser
resolution; conversions between the two round to the nearest mask pixel
(half-up) so tissue fractions are reproducible bit for bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ValidationError
from .grading import GleasonScore

SEG_PATCH_PX = 512
SEG_OVERLAP_PX = 128
SEG_RESOLUTION = 8.0

CLS_PATCH_PX = 256
CLS_STRIDE_PX = 128
CLS_RESOLUTION = 1.0
MIN_TISSUE_FRACTION = 0.10


@dataclass(frozen=True)
class TissueMask:
    width: int
    height: int
    resolution: float
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValidationError(f"mask resolution must be > 0, got {self.resolution}")
        bits = np.asarray(self.bits).astype(bool)
        if bits.shape != (self.height, self.width):
            raise ValidationError(
                f"mask raster shape {bits.shape} does not match declared {self.height}x{self.width}"
            )
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    def save(self, path):
        """Write a 1-bit PNG plus a ``.json`` sidecar carrying the resolution."""
        from PIL import Image

        path = Path(path)
        Image.fromarray(self.bits.astype(np.uint8) * 255).convert("1").save(path, optimize=False)
        sidecar = {"width": self.width, "height": self.height, "resolution": self.resolution}
        path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TissueMask":
        from PIL import Image

        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        with Image.open(path) as im:
            bits = np.asarray(im.convert("L")) > 127
        return cls(int(meta["width"]), int(meta["height"]), float(meta["resolution"]), bits)


@dataclass(frozen=True)
class TileGridSpec:
    patch_px: int = CLS_PATCH_PX
    stride_px: int = CLS_STRIDE_PX
    resolution: float = CLS_RESOLUTION
    min_tissue_fraction: float = MIN_TISSUE_FRACTION

    def __post_init__(self):
        if not (0 < self.stride_px <= self.patch_px):
            raise ValidationError("stride must satisfy 0 < stride <= patch size")
        if not (0.0 <= self.min_tissue_fraction <= 1.0):
            raise ValidationError("min_tissue_fraction must lie in [0, 1]")
        if not self.resolution > 0:
            raise ValidationError("resolution must be > 0")


@dataclass(frozen=True)
class PatchRef:
    slide_id: str
    x: float
    y: float
    patch_px: int
    resolution: float
    tissue_fraction: float = 1.0
    core_id: str | None = None

    def size_base(self, base_resolution: float) -> float:
        """Edge length of the patch in base-resolution pixels."""
        return self.patch_px * self.resolution / base_resolution

    def rect(self, base_resolution: float):
        s = self.size_base(base_resolution)
        return (self.x, self.y, self.x + s, self.y + s)


@dataclass(frozen=True)
class CoreAnnotation:
    core_id: str
    polygon: tuple
    reference_grades: dict = field(default_factory=dict)

    def __post_init__(self):
        poly = tuple((float(x), float(y)) for x, y in self.polygon)
        if len(poly) >= 2 and poly[0] == poly[-1]:
            poly = poly[:-1]
        if len(poly) < 3:
            raise ValidationError(f"core {self.core_id}: polygon needs >= 3 vertices")
        if _polygon_area2(poly) == 0.0:
            raise ValidationError(f"core {self.core_id}: degenerate polygon (zero area)")
        if not _is_simple(poly):
            raise ValidationError(f"core {self.core_id}: polygon is self-intersecting")
        object.__setattr__(self, "polygon", poly)


def _polygon_area2(poly):
    s = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return s


def _orient(a, b, c):
    v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    return (v > 0) - (v < 0)


def _on_segment(a, b, c):
    return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])


def _segments_intersect(p1, p2, p3, p4):
    d1, d2 = _orient(p3, p4, p1), _orient(p3, p4, p2)
    d3, d4 = _orient(p1, p2, p3), _orient(p1, p2, p4)
    if d1 != d2 and d3 != d4 and 0 not in (d1, d2, d3, d4):
        return True
    return (
        (d1 == 0 and _on_segment(p3, p4, p1))
        or (d2 == 0 and _on_segment(p3, p4, p2))
        or (d3 == 0 and _on_segment(p1, p2, p3))
        or (d4 == 0 and _on_segment(p1, p2, p4))
    )


def _is_simple(poly):
    n = len(poly)
    edges = [(poly[i], poly[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_intersect(*edges[i], *edges[j]):
                return False
    return True


def load_annotations(path) -> list[CoreAnnotation]:
    """Read a per-slide annotation document ``[{core_id, polygon, grades}, ...]``."""
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        doc = doc.get("cores", [])
    cores = []
    seen = set()
    for k, item in enumerate(doc):
        try:
            cid = str(item["core_id"])
            poly = item["polygon"]
        except (KeyError, TypeError):
            raise ValidationError(f"{path}: entry {k} lacks core_id/polygon") from None
        if cid in seen:
            raise ValidationError(f"{path}: duplicate core_id {cid!r}")
        seen.add(cid)
        grades = {str(o): GleasonScore.parse(g) for o, g in (item.get("grades") or {}).items()}
        cores.append(CoreAnnotation(cid, tuple(map(tuple, poly)), grades))
    return cores


def save_annotations(cores, path):
    doc = [
        {
            "core_id": c.core_id,
            "polygon": [list(v) for v in c.polygon],
            "grades": {o: str(g) for o, g in sorted(c.reference_grades.items())},
        }
        for c in cores
    ]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def _axis_starts(length, tile, stride, clamp):
    """Grid start offsets along one axis.

    With ``clamp`` the last tile is shifted back so it ends at the edge;
    an axis shorter than one tile yields the single start 0.
    """
    if length <= tile:
        return [0.0]
    starts = []
    pos = 0.0
    while pos + tile <= length + 1e-9:
        starts.append(pos)
        pos += stride
    if clamp and starts[-1] + tile < length - 1e-9:
        starts.append(length - tile)
    return starts


def plan_segmentation_tiles(slide_width, slide_height, base_resolution, slide_id="slide"):
    """Overlapping 512 px tiles at 8.0 µm/px covering the whole slide."""
    if slide_width <= 0 or slide_height <= 0:
        raise ValidationError("slide dimensions must be positive")
    if not base_resolution > 0:
        raise ValidationError("base resolution must be > 0")
    scale = SEG_RESOLUTION / base_resolution
    tile = SEG_PATCH_PX * scale
    stride = (SEG_PATCH_PX - SEG_OVERLAP_PX) * scale
    xs = _axis_starts(slide_width, tile, stride, clamp=True)
    ys = _axis_starts(slide_height, tile, stride, clamp=True)
    return [PatchRef(slide_id, x, y, SEG_PATCH_PX, SEG_RESOLUTION) for y in ys for x in xs]


def threshold_mask(pixels, s_min=0.05, l_max=0.95):
    """Per-pixel tissue rule on an 8-bit RGB raster.

    A pixel is tissue when its HSV saturation is at least ``s_min`` and its
    luminance (Rec. 601 weights) is at most ``l_max``.
    """
    px = np.asarray(pixels)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValidationError(f"expected an RGB raster, got shape {px.shape}")
    rgb = px.astype(np.float64) / 255.0
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    sat = np.where(mx > 0, (mx - mn) / np.where(mx > 0, mx, 1.0), 0.0)
    lum = rgb @ np.array([0.299, 0.587, 0.114])
    return (sat >= s_min) & (lum <= l_max)


def _to_mask_px(v, base_resolution, mask_resolution):
    return int(math.floor(v * base_resolution / mask_resolution + 0.5))


def assemble_mask(tiles, slide_width, slide_height, base_resolution):
    """OR-merge per-tile binary masks into one slide mask at 8.0 µm/px.

    ``tiles`` is an iterable of ``(PatchRef, tile_mask)`` pairs where each
    tile mask is the segmentation output at the tile's own resolution.
    """
    w = max(1, _to_mask_px(slide_width, base_resolution, SEG_RESOLUTION))
    h = max(1, _to_mask_px(slide_height, base_resolution, SEG_RESOLUTION))
    out = np.zeros((h, w), dtype=bool)
    for ref, tile_bits in tiles:
        tile_bits = np.asarray(tile_bits, dtype=bool)
        x0 = _to_mask_px(ref.x, base_resolution, SEG_RESOLUTION)
        y0 = _to_mask_px(ref.y, base_resolution, SEG_RESOLUTION)
        if x0 < 0 or y0 < 0 or x0 >= w or y0 >= h:
            raise ValidationError(f"tile at ({ref.x}, {ref.y}) lies outside the slide")
        th, tw = tile_bits.shape
        # tiles of slides smaller than one tile overhang; crop them
        th, tw = min(th, h - y0), min(tw, w - x0)
        out[y0:y0 + th, x0:x0 + tw] |= tile_bits[:th, :tw]
    return TissueMask(w, h, SEG_RESOLUTION, out)


class _IntegralMask:
    """Summed-area table over a mask for O(1) rectangle counts."""

    def __init__(self, mask: TissueMask):
        self.mask = mask
        sat = np.zeros((mask.height + 1, mask.width + 1), dtype=np.int64)
        sat[1:, 1:] = mask.bits.astype(np.int64).cumsum(0).cumsum(1)
        self.sat = sat

    def fraction(self, rect, base_resolution):
        m = self.mask
        x0, y0, x1, y1 = (_to_mask_px(v, base_resolution, m.resolution) for v in rect)
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, m.width), min(y1, m.height)
        if x1 <= x0 or y1 <= y0:
            raise ValidationError(f"empty rectangle {rect} at mask resolution")
        s = self.sat
        tissue = s[y1, x1] - s[y0, x1] - s[y1, x0] + s[y0, x0]
        return int(tissue) / ((x1 - x0) * (y1 - y0))


def tissue_fraction(mask: TissueMask, rect, base_resolution=CLS_RESOLUTION) -> float:
    """Share of tissue pixels under a base-coordinate rectangle ``(x0, y0, x1, y1)``."""
    return _IntegralMask(mask).fraction(rect, base_resolution)


def plan_classification_patches(mask: TissueMask, spec: TileGridSpec = TileGridSpec(),
                                base_resolution=None, slide_id="slide"):
    """Row-major grid of patches whose tissue fraction reaches the threshold.

    ``base_resolution`` defaults to the grid resolution, i.e. coordinates are
    expressed in pixels of the classification level. The grid is not edge
    clamped: trailing strips narrower than one stride are skipped.
    """
    if base_resolution is None:
        base_resolution = spec.resolution
    scale = spec.resolution / base_resolution
    tile = spec.patch_px * scale
    stride = spec.stride_px * scale
    width = mask.width * mask.resolution / base_resolution
    height = mask.height * mask.resolution / base_resolution
    if width < tile or height < tile:
        return []
    integral = _IntegralMask(mask)
    out = []
    for y in _axis_starts(height, tile, stride, clamp=False):
        for x in _axis_starts(width, tile, stride, clamp=False):
            frac = integral.fraction((x, y, x + tile, y + tile), base_resolution)
            if frac >= spec.min_tissue_fraction:
                out.append(PatchRef(slide_id, x, y, spec.patch_px, spec.resolution, frac))
    return out


def assign_patches_to_cores(patches, cores, base_resolution=CLS_RESOLUTION):
    """Map each core id to the indices of patches whose rectangle touches its polygon.

    A patch overlapping several cores is listed under each of them.
    """
    rects = np.array([p.rect(base_resolution) for p in patches], dtype=np.float64).reshape(-1, 4)
    assignment = {}
    for core in cores:
        if not isinstance(core, CoreAnnotation):
            raise ValidationError("cores must be CoreAnnotation instances")
        px = np.array([v[0] for v in core.polygon])
        py = np.array([v[1] for v in core.polygon])
        if len(rects):
            hits = _kernels.rects_intersect_polygon(rects, px, py)
            assignment[core.core_id] = [int(i) for i in np.flatnonzero(hits)]
        else:
            assignment[core.core_id] = []
    return assignment


def detect_empty_cores(assignment, cores):
    """QC report listing cores without any assigned patch."""
    ids = [c.core_id for c in cores]
    empty = [cid for cid in ids if not assignment.get(cid)]
    n = len(ids)
    rate = len(empty) / n if n else 0.0
    return {
        "n_cores": n,
        "n_empty": len(empty),
        "empty_rate": rate,
        "empty_rate_percent": 100.0 * rate,
        "empty_core_ids": empty,
    }
