"""Shared domain types, box geometry and pipeline configuration."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

WGS84 = "EPSG:4326"


class ObjectClass(enum.IntEnum):
    SINGLE_PLATFORM = 0
    PLATFORM_CLUSTER = 1
    WIND_TURBINE = 2
    # evaluation-only pseudo class, never written as a class id in label/detection files
    PLATFORM = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_id(cls, class_id) -> "ObjectClass":
        """Parse a file-level class id; only 0, 1 and 2 are accepted."""
        if isinstance(class_id, bool) or int(class_id) != class_id or class_id not in (0, 1, 2):
            raise ValueError(f"invalid class id {class_id!r}")
        return cls(int(class_id))


FILE_CLASSES = (ObjectClass.SINGLE_PLATFORM, ObjectClass.PLATFORM_CLUSTER, ObjectClass.WIND_TURBINE)
MERGED_CLASSES = (ObjectClass.PLATFORM, ObjectClass.WIND_TURBINE)


def merge_class(c: ObjectClass) -> ObjectClass:
    """Collapse single platforms and platform clusters into ``PLATFORM``."""
    if c in (ObjectClass.SINGLE_PLATFORM, ObjectClass.PLATFORM_CLUSTER, ObjectClass.PLATFORM):
        return ObjectClass.PLATFORM
    return ObjectClass(c)


@dataclass(frozen=True)
class RasterF:
    """Floating point backscatter grid in dB, row-major ``(height, width)``."""

    values: np.ndarray
    nodata: Optional[float] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"raster must be a non-empty 2-D grid, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def valid_mask(self) -> np.ndarray:
        """NaN is never valid; ``nodata`` marks further missing pixels."""
        valid = ~np.isnan(self.values)
        if self.nodata is not None and not math.isnan(self.nodata):
            valid &= self.values != self.nodata
        return valid


def as_raster8(values) -> np.ndarray:
    """Validate and return an 8-bit raster as a 2-D ``uint8`` array."""
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"raster must be a non-empty 2-D grid, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("8-bit raster values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


@dataclass(frozen=True)
class GeoTransform:
    """Affine pixel -> world mapping.

    ``lon = a + b*col + c*row`` and ``lat = d + e*col + f*row``. Coefficients
    may be any real number type; using ``fractions.Fraction`` gives exact
    arithmetic.
    """

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float
    crs: str = WGS84

    def __post_init__(self):
        if self.determinant == 0:
            raise ValueError("singular geotransform")

    @property
    def determinant(self):
        return self.b * self.f - self.c * self.e

    @classmethod
    def from_list(cls, coeffs, crs: str = WGS84) -> "GeoTransform":
        if len(coeffs) != 6:
            raise ValueError("geotransform needs exactly six coefficients")
        return cls(*coeffs, crs=crs)

    def to_list(self) -> list:
        return [self.a, self.b, self.c, self.d, self.e, self.f]

    def apply(self, col, row):
        return (self.a + self.b * col + self.c * row, self.d + self.e * col + self.f * row)

    def inverse_apply(self, x, y):
        """World coordinates back to (col, row)."""
        det = self.determinant
        dx, dy = x - self.a, y - self.d
        return ((self.f * dx - self.c * dy) / det, (self.b * dy - self.e * dx) / det)

    def translated(self, col_off, row_off) -> "GeoTransform":
        """Transform of a sub-window whose pixel (0, 0) is ``(col_off, row_off)`` here."""
        return GeoTransform(
            self.a + self.b * col_off + self.c * row_off, self.b, self.c,
            self.d + self.e * col_off + self.f * row_off, self.e, self.f,
            crs=self.crs,
        )


@dataclass(frozen=True)
class PixelBBox:
    """Continuous pixel box, origin top-left, y down; x0/y0 inclusive, x1/y1 exclusive."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"invalid pixel box {self.as_tuple()}")

    def as_tuple(self) -> tuple:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def center(self) -> tuple:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)

    def clipped(self, width, height) -> Optional["PixelBBox"]:
        """Intersection with ``[0, width] x [0, height]``, or None when empty."""
        x0, y0 = max(self.x0, 0), max(self.y0, 0)
        x1, y1 = min(self.x1, width), min(self.y1, height)
        if x0 < x1 and y0 < y1:
            return PixelBBox(x0, y0, x1, y1)
        return None


@dataclass(frozen=True)
class GeoBBox:
    lon_min: float
    lat_min: float
    lon_max: float
    lat_max: float

    def __post_init__(self):
        if not (self.lon_min < self.lon_max and self.lat_min < self.lat_max):
            raise ValueError(f"invalid geographic box {self.as_tuple()}")
        if not (-180 <= self.lon_min and self.lon_max <= 180 and -90 <= self.lat_min and self.lat_max <= 90):
            raise ValueError(f"geographic box out of range {self.as_tuple()}")

    def as_tuple(self) -> tuple:
        return (self.lon_min, self.lat_min, self.lon_max, self.lat_max)

    @property
    def area(self) -> float:
        return (self.lon_max - self.lon_min) * (self.lat_max - self.lat_min)


Box = Union[PixelBBox, GeoBBox]


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two axis-aligned boxes of the same kind."""
    ax0, ay0, ax1, ay1 = a.as_tuple()
    bx0, by0, bx1, by1 = b.as_tuple()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(min(1.0, inter / union))


def _corners(x0, y0, x1, y1):
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))


def geolocate(box_px: PixelBBox, gt: GeoTransform) -> GeoBBox:
    """Axis-aligned lon/lat hull of the four mapped box corners."""
    if gt.determinant == 0:
        raise ValueError("singular geotransform")
    pts = [gt.apply(x, y) for x, y in _corners(*box_px.as_tuple())]
    lons = [p[0] for p in pts]
    lats = [p[1] for p in pts]
    return GeoBBox(min(lons), min(lats), max(lons), max(lats))


def pixel_box_of(box_geo: GeoBBox, gt: GeoTransform) -> PixelBBox:
    """Axis-aligned pixel hull of a geographic box under the inverse transform."""
    pts = [gt.inverse_apply(x, y) for x, y in _corners(*box_geo.as_tuple())]
    cols = [p[0] for p in pts]
    rows = [p[1] for p in pts]
    return PixelBBox(min(cols), min(rows), max(cols), max(rows))


@dataclass(frozen=True)
class Label:
    """Normalized box label relative to its image: centre and size in [0, 1]."""

    cls: ObjectClass
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0 <= self.cx <= 1 and 0 <= self.cy <= 1 and 0 < self.w <= 1 and 0 < self.h <= 1):
            raise ValueError(f"label out of range: {self}")

    @classmethod
    def from_pixel_box(cls, c: ObjectClass, box: PixelBBox, width, height) -> "Label":
        clipped = box.clipped(width, height)
        if clipped is None:
            raise ValueError("label box lies outside the image")
        cx, cy = clipped.center
        return cls(ObjectClass(c), cx / width, cy / height,
                   (clipped.x1 - clipped.x0) / width, (clipped.y1 - clipped.y0) / height)

    def to_pixel_box(self, width, height) -> PixelBBox:
        return PixelBBox((self.cx - self.w / 2) * width, (self.cy - self.h / 2) * height,
                         (self.cx + self.w / 2) * width, (self.cy + self.h / 2) * height)

    def to_line(self) -> str:
        return f"{int(self.cls)} {self.cx:.6f} {self.cy:.6f} {self.w:.6f} {self.h:.6f}"

    @classmethod
    def from_line(cls, line: str) -> "Label":
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"malformed label line: {line!r}")
        return cls(ObjectClass.from_id(int(parts[0])), *(float(p) for p in parts[1:]))


@dataclass(frozen=True)
class Detection:
    id: Optional[int]
    chip_id: str
    cls: ObjectClass
    confidence: float
    box_px: Optional[PixelBBox]
    box_geo: Optional[GeoBBox] = None

    def __post_init__(self):
        if not 0 <= self.confidence <= 1:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.box_px is None and self.box_geo is None:
            raise ValueError("detection needs a pixel or geographic box")

    def with_(self, **changes) -> "Detection":
        return dataclasses.replace(self, **changes)

    def to_record(self) -> dict:
        """External detector JSON-Lines record."""
        return {"chip_id": self.chip_id, "class_id": int(self.cls),
                "conf": self.confidence, "bbox_px": list(self.box_px.as_tuple())}

    @classmethod
    def from_record(cls, rec: dict) -> "Detection":
        try:
            return cls(id=rec.get("id"), chip_id=str(rec["chip_id"]),
                       cls=ObjectClass.from_id(rec["class_id"]),
                       confidence=float(rec["conf"]), box_px=PixelBBox(*rec["bbox_px"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed detection record {rec!r}") from exc


@dataclass(frozen=True)
class PipelineConfig:
    db_lo: float = -40.0
    db_hi: float = 0.0
    chip_size: int = 640
    chip_overlap: float = 0.2
    grid_step_m: float = 100_000.0
    grid_tile_m: float = 110_000.0
    conf_threshold: float = 0.5
    dark_pixel_threshold: int = 150
    dedup_iou: float = 0.2
    eval_iou: float = 0.3
    coast_buffer_m: float = 1_000.0
    pixel_size_m: float = 10.0

    def __post_init__(self):
        problems = []
        if not self.db_lo < self.db_hi:
            problems.append("db_lo must be below db_hi")
        if not 0 <= self.chip_overlap < 1:
            problems.append("chip_overlap must lie in [0, 1)")
        if int(self.chip_size) != self.chip_size or self.chip_size < 1:
            problems.append("chip_size must be a positive integer")
        if not 0 < self.grid_step_m <= self.grid_tile_m:
            problems.append("need 0 < grid_step_m <= grid_tile_m")
        for name in ("conf_threshold", "dedup_iou", "eval_iou"):
            if not 0 <= getattr(self, name) <= 1:
                problems.append(f"{name} must lie in [0, 1]")
        if not 0 <= self.dark_pixel_threshold <= 255:
            problems.append("dark_pixel_threshold must lie in [0, 255]")
        if self.coast_buffer_m < 0 or self.pixel_size_m <= 0:
            problems.append("coast_buffer_m must be >= 0 and pixel_size_m > 0")
        if problems:
            raise ValueError("invalid pipeline config: " + "; ".join(problems))

    @property
    def chip_stride(self) -> int:
        return int(math.floor(self.chip_size * (1 - self.chip_overlap) + 0.5))

    @property
    def coast_buffer_px(self) -> float:
        return self.coast_buffer_m / self.pixel_size_m

    def override(self, **changes) -> "PipelineConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        data = json.loads(Path(path).read_text())
        if "pipeline" in data and isinstance(data["pipeline"], dict):
            data = data["pipeline"]
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)
