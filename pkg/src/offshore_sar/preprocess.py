"""Median compositing, 8-bit quantization, grid tiling and overlap chipping."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import GeoTransform, PipelineConfig, RasterF, as_raster8
from .fileio import read_pgm, write_chip_sidecar, write_pgm


@dataclass(frozen=True)
class TileSpec:
    tile_id: str
    bounds_m: tuple
    geotransform: GeoTransform


@dataclass(frozen=True)
class Chip:
    chip_id: str
    tile_id: str
    raster: np.ndarray
    offset_px: tuple
    geotransform: GeoTransform

    @property
    def width(self) -> int:
        return self.raster.shape[1]

    @property
    def height(self) -> int:
        return self.raster.shape[0]


def median_composite(stack: Sequence[RasterF]) -> RasterF:
    """Per-pixel median over the valid (non-nodata) values of an aligned stack.

    Even counts take the mean of the two middle values. Pixels with no valid
    input come out as the first raster's nodata value.
    """
    if len(stack) == 0:
        raise ValueError("empty stack")
    shape = stack[0].values.shape
    if any(r.values.shape != shape for r in stack):
        raise ValueError("shape mismatch")
    cube = np.stack([np.where(r.valid_mask(), r.values, np.nan) for r in stack])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(cube, axis=0)
    empty = np.isnan(med)
    nodata = stack[0].nodata
    if empty.any():
        if nodata is None:
            nodata = next((r.nodata for r in stack if r.nodata is not None), float("nan"))
        med[empty] = nodata
    return RasterF(med, nodata)


def quantize_db(r: RasterF, cfg: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """Clip to ``[db_lo, db_hi]`` and map linearly onto 0..255, rounding half up."""
    valid = r.valid_mask()
    values = np.where(valid, r.values, cfg.db_lo)
    scaled = np.clip((values - cfg.db_lo) / (cfg.db_hi - cfg.db_lo), 0.0, 1.0) * 255.0
    out = np.floor(scaled + 0.5).astype(np.uint8)
    out[~valid] = 0
    return out


def dequantize(value, cfg: PipelineConfig = PipelineConfig()):
    """dB value that an 8-bit intensity represents (inverse of the linear map)."""
    return cfg.db_lo + np.asarray(value, dtype=np.float64) / 255.0 * (cfg.db_hi - cfg.db_lo)


def make_grid(roi_bounds_m, cfg: PipelineConfig = PipelineConfig(), crs: str = "LOCAL") -> list:
    """Overlapping square tiles over a planar ROI given in metres.

    Tile geotransforms map tile pixels to the caller's planar frame (top-left
    origin, y down), so they carry ``crs`` rather than WGS84.
    """
    x0, y0, x1, y1 = roi_bounds_m
    if not (x1 > x0 and y1 > y0):
        raise ValueError("ROI must have positive extent")
    step, size = cfg.grid_step_m, cfg.grid_tile_m
    nx = math.ceil((x1 - x0) / step)
    ny = math.ceil((y1 - y0) / step)
    tiles = []
    for j in range(ny):
        for i in range(nx):
            tx, ty = x0 + i * step, y0 + j * step
            gt = GeoTransform(tx, cfg.pixel_size_m, 0.0, ty + size, 0.0, -cfg.pixel_size_m, crs=crs)
            tiles.append(TileSpec(f"T{i:03d}_{j:03d}", (tx, ty, tx + size, ty + size), gt))
    return tiles


def chip_anchors(dim: int, chip_size: int, stride: int) -> list:
    """Regular anchors every ``stride`` pixels plus one snapped to the far edge."""
    if dim < chip_size:
        raise ValueError("tile too small")
    if stride < 1:
        raise ValueError("chip stride must be at least 1 pixel")
    anchors = list(range(0, dim - chip_size + 1, stride))
    if anchors[-1] + chip_size < dim:
        anchors.append(dim - chip_size)
    return anchors


def chip_tile(raster, gt: GeoTransform, tile_id: str, cfg: PipelineConfig = PipelineConfig()) -> list:
    raster = as_raster8(raster)
    h, w = raster.shape
    size = cfg.chip_size
    if h < size or w < size:
        raise ValueError("tile too small")
    xs = chip_anchors(w, size, cfg.chip_stride)
    ys = chip_anchors(h, size, cfg.chip_stride)
    chips = []
    for row, y in enumerate(ys):
        for col, x in enumerate(xs):
            chips.append(Chip(
                chip_id=f"{tile_id}_{col}_{row}",
                tile_id=tile_id,
                raster=raster[y:y + size, x:x + size].copy(),
                offset_px=(x, y),
                geotransform=gt.translated(x, y),
            ))
    return chips


def write_chips(chips, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for chip in chips:
        write_pgm(out / f"{chip.chip_id}.pgm", chip.raster)
        write_chip_sidecar(out / f"{chip.chip_id}.json", chip)


def load_chips(chip_dir) -> dict:
    """Read every ``{chip_id}.pgm`` + ``{chip_id}.json`` pair in a directory."""
    chips = {}
    for meta_path in sorted(Path(chip_dir).glob("*.json")):
        meta = json.loads(meta_path.read_text())
        pgm = meta_path.with_suffix(".pgm")
        if "chip_id" not in meta or not pgm.exists():
            continue
        gt = GeoTransform.from_list(meta["geotransform"], crs=meta.get("crs", "EPSG:4326"))
        chips[meta["chip_id"]] = Chip(meta["chip_id"], meta.get("tile_id", ""), read_pgm(pgm),
                                      tuple(meta.get("offset_px", (0, 0))), gt)
    return chips
