"""Merge raw per-chip detections into one clean, georeferenced detection set."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .core import Detection, GeoBBox, ObjectClass, PipelineConfig, geolocate


@dataclass(frozen=True)
class DetectionGroup:
    members: tuple
    representative: int

    @property
    def chosen(self) -> Detection:
        return self.members[self.representative]


def assign_ids(dets: Sequence[Detection]) -> list:
    """Number detections 0..n-1 in ``(chip_id, box, class, confidence)`` order.

    Ids then depend only on the detections themselves, never on input order.
    """
    def key(d):
        box = d.box_px.as_tuple() if d.box_px is not None else ()
        geo = d.box_geo.as_tuple() if d.box_geo is not None else ()
        return (d.chip_id, box, geo, int(d.cls), d.confidence)

    return [d.with_(id=i) for i, d in enumerate(sorted(dets, key=key))]


def filter_confidence(dets: Sequence[Detection], cfg: PipelineConfig = PipelineConfig()) -> list:
    return [d for d in dets if d.confidence >= cfg.conf_threshold]


def box_pixels(raster: np.ndarray, box) -> np.ndarray:
    """Pixels whose centres fall inside the box after clipping to the raster."""
    h, w = raster.shape
    clipped = box.clipped(w, h)
    if clipped is None:
        return raster[0:0, 0:0]
    # pixel i has its centre at i + 0.5; keep x0 <= centre < x1
    ix0 = max(0, math.ceil(clipped.x0 - 0.5))
    iy0 = max(0, math.ceil(clipped.y0 - 0.5))
    ix1 = min(w, math.ceil(clipped.x1 - 0.5))
    iy1 = min(h, math.ceil(clipped.y1 - 0.5))
    return raster[iy0:iy1, ix0:ix1]


def filter_dark(dets: Sequence[Detection], chips: Mapping, cfg: PipelineConfig = PipelineConfig()) -> list:
    """Drop detections whose box holds no pixel at or above ``dark_pixel_threshold``."""
    kept = []
    for d in dets:
        chip = chips.get(d.chip_id)
        if chip is None:
            raise KeyError(f"unknown chip {d.chip_id!r}")
        pixels = box_pixels(chip.raster, d.box_px)
        if pixels.size and pixels.max() >= cfg.dark_pixel_threshold:
            kept.append(d)
    return kept


def geolocate_all(dets: Sequence[Detection], chips: Mapping) -> list:
    out = []
    for d in dets:
        chip = chips.get(d.chip_id)
        if chip is None:
            raise KeyError(f"unknown chip {d.chip_id!r}")
        out.append(d.with_(box_geo=geolocate(d.box_px, chip.geotransform)))
    return out


def overlap_edges(boxes: np.ndarray, threshold: float) -> tuple:
    """Index pairs ``(i, j)``, ``i < j``, whose IoU is at least ``threshold``.

    Boxes are sorted by their left edge so each box is only compared against
    boxes that start before it ends.
    """
    n = len(boxes)
    if n < 2:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    order = np.argsort(boxes[:, 0], kind="stable")
    b = boxes[order]
    areas = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    starts = b[:, 0]
    rows, cols = [], []
    for i in range(n - 1):
        stop = np.searchsorted(starts, b[i, 2], side="left")
        if stop <= i + 1:
            continue
        j = np.arange(i + 1, stop)
        iw = np.minimum(b[i, 2], b[j, 2]) - np.maximum(b[i, 0], b[j, 0])
        ih = np.minimum(b[i, 3], b[j, 3]) - np.maximum(b[i, 1], b[j, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = areas[i] + areas[j] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            hit = (inter > 0) & (np.minimum(1.0, inter / union) >= threshold)
        rows.append(np.full(hit.sum(), i))
        cols.append(j[hit])
    if not rows:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    r, c = np.concatenate(rows), np.concatenate(cols)
    return order[r], order[c]


def group_overlaps(dets: Sequence[Detection], cfg: PipelineConfig = PipelineConfig()) -> list:
    """Connected components of the geographic IoU >= ``dedup_iou`` graph.

    Members are ordered by id, groups by their smallest member id.
    """
    for d in dets:
        if d.box_geo is None:
            raise ValueError("ungeolocated detection")
    dets = sorted(dets, key=lambda d: (d.id is None, d.id))
    n = len(dets)
    if n == 0:
        return []
    boxes = np.array([d.box_geo.as_tuple() for d in dets], dtype=np.float64)
    r, c = overlap_edges(boxes, cfg.dedup_iou)
    graph = coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    buckets = {}
    for idx, lab in enumerate(labels):
        buckets.setdefault(lab, []).append(dets[idx])
    groups = []
    for members in sorted(buckets.values(), key=lambda m: m[0].id if m[0].id is not None else -1):
        group = DetectionGroup(tuple(members), 0)
        chosen = select_representative(group)
        groups.append(DetectionGroup(group.members, group.members.index(chosen)))
    return groups


def select_representative(group: DetectionGroup) -> Detection:
    """Best member of the strict-majority class, else the best member overall.

    "Best" is highest confidence, ties going to the smaller id.
    """
    members = group.members
    if not members:
        raise ValueError("empty detection group")
    votes = Counter(d.cls for d in members)
    top_class, top_votes = votes.most_common(1)[0]
    pool = members
    if top_votes * 2 > len(members):
        pool = [d for d in members if d.cls == top_class]
    return min(pool, key=lambda d: (-d.confidence, d.id if d.id is not None else math.inf))


def postprocess_run(dets: Sequence[Detection], chips: Mapping, cfg: PipelineConfig = PipelineConfig()) -> list:
    dets = assign_ids(dets)
    dets = filter_confidence(dets, cfg)
    dets = filter_dark(dets, chips, cfg)
    dets = geolocate_all(dets, chips)
    return [g.chosen for g in group_overlaps(dets, cfg)]


def _ring(box: GeoBBox) -> list:
    return [[box.lon_min, box.lat_min], [box.lon_max, box.lat_min], [box.lon_max, box.lat_max],
            [box.lon_min, box.lat_max], [box.lon_min, box.lat_min]]


def export_geojson(dets: Sequence[Detection]) -> bytes:
    features = []
    for d in dets:
        if d.box_geo is None:
            raise ValueError("ungeolocated detection")
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [_ring(d.box_geo)]},
            "properties": {"id": d.id, "class_id": int(d.cls), "class_name": ObjectClass(d.cls).label,
                           "confidence": d.confidence, "chip_id": d.chip_id},
        })
    return (json.dumps({"type": "FeatureCollection", "features": features}, indent=1) + "\n").encode()


def read_geojson(data) -> list:
    """Parse a FeatureCollection written by :func:`export_geojson` back into detections."""
    if isinstance(data, (bytes, str)):
        data = json.loads(data)
    if data.get("type") != "FeatureCollection":
        raise ValueError("not a GeoJSON FeatureCollection")
    dets = []
    for feat in data["features"]:
        ring = feat["geometry"]["coordinates"][0]
        lons = [p[0] for p in ring]
        lats = [p[1] for p in ring]
        props = feat.get("properties") or {}
        dets.append(Detection(
            id=props.get("id"),
            chip_id=str(props.get("chip_id", "")),
            cls=ObjectClass.from_id(props["class_id"]),
            confidence=float(props.get("confidence", 1.0)),
            box_px=None,
            box_geo=GeoBBox(min(lons), min(lats), max(lons), max(lats)),
        ))
    return dets
