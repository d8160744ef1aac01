"""On-disk formats: binary PGM rasters, chip sidecars, dB rasters, JSON Lines."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .core import GeoTransform, RasterF, as_raster8


def encode_pgm(raster) -> bytes:
    arr = as_raster8(raster)
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def write_pgm(path, raster) -> None:
    Path(path).write_bytes(encode_pgm(raster))


def _pgm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the pixel data
    return tokens, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM (missing P5 magic)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"unsupported PGM maxval {maxval}")
    body = data[offset:offset + w * h]
    if len(body) != w * h:
        raise ValueError("truncated PGM pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_raster_f(path, raster: RasterF) -> None:
    """dB rasters are stored as ``.npz`` with ``values`` and an optional ``nodata``."""
    arrays = {"values": raster.values}
    if raster.nodata is not None:
        arrays["nodata"] = np.float64(raster.nodata)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_raster_f(path) -> RasterF:
    with np.load(path) as data:
        nodata = float(data["nodata"]) if "nodata" in data.files else None
        return RasterF(data["values"], nodata)


def write_chip_sidecar(path, chip) -> None:
    payload = {
        "chip_id": chip.chip_id,
        "tile_id": chip.tile_id,
        "offset_px": list(chip.offset_px),
        "geotransform": [float(v) for v in chip.geotransform.to_list()],
        "crs": chip.geotransform.crs,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_geotransform_json(path):
    """Load ``{"geotransform": [...], "crs": ..., "tile_id": ...}``; returns (gt, tile_id)."""
    data = json.loads(Path(path).read_text())
    gt = GeoTransform.from_list(data["geotransform"], crs=data.get("crs", "EPSG:4326"))
    return gt, data.get("tile_id")


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path) -> Iterator[dict]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON") from exc
