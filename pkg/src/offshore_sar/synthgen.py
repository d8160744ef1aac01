"""Procedural synthetic SAR training scenes with automatically derived labels.

The workflow is: segment a background into land / coast / sea entities,
screen out backgrounds that already contain bright targets, lay a jittered
anchor grid over the sea, build a line-and-point geometry per object
(single point for single platforms and turbines), rotate it onto an anchor
and stamp a randomized Gaussian kernel at every geometry point. Labels come
straight from the placed geometry.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import FILE_CLASSES, Label, ObjectClass, PipelineConfig, PixelBBox, RasterF, as_raster8
from .fileio import encode_pgm
from .preprocess import quantize_db


class Entity(enum.IntEnum):
    SEA = 0
    COAST = 1
    LAND = 2


class PlacementError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EntityMap:
    classes: np.ndarray

    @property
    def width(self) -> int:
        return self.classes.shape[1]

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def sea(self) -> np.ndarray:
        return self.classes == Entity.SEA

    def is_sea(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height and self.classes[y, x] == Entity.SEA


def build_entity_map(land_mask, cfg: PipelineConfig = PipelineConfig()) -> EntityMap:
    land = np.asarray(land_mask).astype(bool)
    if land.ndim != 2 or land.size == 0:
        raise ValueError("land mask must be a non-empty 2-D grid")
    classes = np.full(land.shape, Entity.SEA, dtype=np.uint8)
    if land.any():
        # distance from every water pixel to the nearest land pixel
        dist = ndimage.distance_transform_edt(~land)
        classes[(~land) & (dist <= cfg.coast_buffer_px)] = Entity.COAST
        classes[land] = Entity.LAND
    return EntityMap(classes)


def screen_background(scene, entity_map: EntityMap, reject_threshold: int = 120) -> bool:
    """Accept a background only when no sea pixel reaches ``reject_threshold``."""
    scene = as_raster8(scene)
    if scene.shape != entity_map.classes.shape:
        raise ValueError("scene and entity map dimensions differ")
    sea_values = scene[entity_map.sea]
    return not (sea_values.size and sea_values.max() >= reject_threshold)


@dataclass(frozen=True)
class AnchorGrid:
    spacing: int
    points: tuple
    seed: Optional[int] = None


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), rng


def make_anchor_grid(em: EntityMap, spacing: int, rng=None, jitter: bool = True) -> AnchorGrid:
    """Cell-centre anchors over all-sea cells, jittered by up to a quarter cell.

    Jitter is drawn in whole pixels, so neighbouring anchors stay at least
    ``spacing / 2`` apart along each axis.
    """
    if spacing < 1:
        raise ValueError("anchor spacing must be >= 1")
    rng, seed = _as_rng(rng)
    reach = spacing // 4 if jitter else 0
    sea = em.sea
    points = []
    for cy in range(em.height // spacing):
        for cx in range(em.width // spacing):
            y0, x0 = cy * spacing, cx * spacing
            if not sea[y0:y0 + spacing, x0:x0 + spacing].all():
                continue
            x = x0 + spacing // 2
            y = y0 + spacing // 2
            if reach:
                x += int(rng.integers(-reach, reach + 1))
                y += int(rng.integers(-reach, reach + 1))
            if em.is_sea(x, y):
                points.append((x, y))
    return AnchorGrid(spacing, tuple(points), seed)


@dataclass(frozen=True)
class ClusterParams:
    n_lines: tuple = (2, 4)
    line_length_px: tuple = (12.0, 40.0)
    connection_angle_deg: tuple = (45.0, 60.0, 90.0, 120.0, 135.0)
    point_spacing_px: tuple = (6.0, 14.0)

    def __post_init__(self):
        for name in ("n_lines", "line_length_px", "point_spacing_px"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a non-empty positive range")
        if not self.connection_angle_deg or not all(0 < a < 180 for a in self.connection_angle_deg):
            raise ValueError("connection angles must lie in (0, 180) degrees")
        if self.point_spacing_px[0] > self.line_length_px[1]:
            raise ValueError("degenerate cluster params")


@dataclass(frozen=True)
class ClusterGeometry:
    lines: tuple
    points: tuple


def _points_along(p0, p1, spacing):
    length = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
    n = max(1, int(math.floor(length / spacing + 0.5)))
    return [(p0[0] + (p1[0] - p0[0]) * k / n, p0[1] + (p1[1] - p0[1]) * k / n) for k in range(n + 1)]


def gen_cluster_geometry(params: ClusterParams, rng=None) -> ClusterGeometry:
    rng, _ = _as_rng(rng)
    n_lines = int(rng.integers(params.n_lines[0], params.n_lines[1] + 1))
    heading = rng.uniform(0.0, 360.0)
    lines, headings, endpoints = [], [], []
    points = []

    def add_segment(start, hdg):
        length = rng.uniform(*params.line_length_px)
        spacing = rng.uniform(*params.point_spacing_px)
        rad = math.radians(hdg)
        end = (start[0] + length * math.cos(rad), start[1] + length * math.sin(rad))
        seg = len(lines)
        lines.append((start, end))
        headings.append(hdg)
        endpoints.extend([(start, seg), (end, seg)])
        for p in _points_along(start, end, spacing):
            if not any(abs(p[0] - q[0]) < 1e-9 and abs(p[1] - q[1]) < 1e-9 for q in points):
                points.append(p)

    add_segment((0.0, 0.0), heading)
    for _ in range(n_lines - 1):
        start, seg = endpoints[int(rng.integers(len(endpoints)))]
        turn = float(rng.choice(params.connection_angle_deg)) * (1 if rng.random() < 0.5 else -1)
        add_segment(start, headings[seg] + turn)
    if len(points) < 2:
        raise ValueError("degenerate cluster params")
    return ClusterGeometry(tuple(lines), tuple(points))


def gen_point_geometry(cls: ObjectClass) -> ClusterGeometry:
    if ObjectClass(cls) not in (ObjectClass.SINGLE_PLATFORM, ObjectClass.WIND_TURBINE):
        raise ValueError(f"point geometry is only defined for single platforms and turbines, not {cls!r}")
    return ClusterGeometry((), ((0.0, 0.0),))


@dataclass(frozen=True)
class KernelSpec:
    size: tuple
    orientation_deg: float
    peak: float
    sigma: tuple

    def __post_init__(self):
        h, w = self.size
        if h < 1 or w < 1 or h % 2 == 0 or w % 2 == 0:
            raise ValueError("kernel size must be odd and >= 1")
        if not 150 <= self.peak <= 255:
            raise ValueError("kernel peak must lie in [150, 255]")
        major, minor = self.sigma
        if not major >= minor > 0:
            raise ValueError("need sigma_major >= sigma_minor > 0")
        if not 0 <= self.orientation_deg < 180:
            raise ValueError("orientation must lie in [0, 180)")

    @property
    def half_diagonal(self) -> float:
        h, w = self.size
        return math.hypot((w - 1) / 2, (h - 1) / 2)


def render_kernel(spec: KernelSpec) -> np.ndarray:
    """Anisotropic Gaussian stamp of shape ``spec.size`` peaking at its centre."""
    h, w = spec.size
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    x -= (w - 1) / 2
    y -= (h - 1) / 2
    t = math.radians(spec.orientation_deg)
    u = x * math.cos(t) + y * math.sin(t)
    v = -x * math.sin(t) + y * math.cos(t)
    major, minor = spec.sigma
    return spec.peak * np.exp(-0.5 * (u ** 2 / major ** 2 + v ** 2 / minor ** 2))


# odd kernel edge lengths per class
DEFAULT_KERNEL_SIZES = {
    ObjectClass.SINGLE_PLATFORM: (9, 31),
    ObjectClass.PLATFORM_CLUSTER: (9, 31),
    ObjectClass.WIND_TURBINE: (5, 15),
}


def random_kernel(cls: ObjectClass, rng, cfg: PipelineConfig = PipelineConfig(),
                  sizes: Optional[dict] = None) -> KernelSpec:
    lo, hi = (sizes or DEFAULT_KERNEL_SIZES)[ObjectClass(cls)]
    odd = np.arange(lo | 1, hi + 1, 2)
    h, w = int(rng.choice(odd)), int(rng.choice(odd))
    major = rng.uniform(0.18, 0.3) * max(h, w)
    minor = major * rng.uniform(0.4, 1.0)
    return KernelSpec(
        size=(h, w),
        orientation_deg=float(rng.uniform(0.0, 180.0)),
        peak=float(rng.uniform(max(150, cfg.dark_pixel_threshold), 255.0)),
        sigma=(float(major), float(minor)),
    )


@dataclass(frozen=True)
class SynthObject:
    cls: ObjectClass
    geometry: ClusterGeometry
    anchor: tuple
    rotation_deg: float
    kernels: tuple
    placed_points: tuple
    box_px: PixelBBox


@dataclass(frozen=True)
class SynthScene:
    background: np.ndarray
    entity_map: EntityMap
    objects: tuple = ()
    labels: tuple = ()
    background_index: Optional[int] = None

    def label_text(self) -> str:
        return "".join(label.to_line() + "\n" for label in self.labels)


def place_points(geometry: ClusterGeometry, anchor, rotation_deg: float) -> tuple:
    """Rotate geometry about its origin, move it to ``anchor`` and snap to pixels."""
    t = math.radians(rotation_deg)
    ct, st = math.cos(t), math.sin(t)
    out = []
    for x, y in geometry.points:
        px = anchor[0] + x * ct - y * st
        py = anchor[1] + x * st + y * ct
        out.append((int(math.floor(px + 0.5)), int(math.floor(py + 0.5))))
    return tuple(out)


def place_object(scene: SynthScene, cls: ObjectClass, geometry: ClusterGeometry, anchor,
                 rotation_deg: float, kernels: Sequence[KernelSpec]) -> SynthScene:
    """Stamp one object into a copy of the scene and append its label.

    Kernels are max-blended onto the background. The label box is the placed
    geometry extent, dilated by each point's kernel half-diagonal, around
    pixel centres (pixel ``i`` spans ``[i, i + 1)``).
    """
    if len(kernels) != len(geometry.points):
        raise ValueError("need exactly one kernel per geometry point")
    em = scene.entity_map
    height, width = scene.background.shape
    placed = place_points(geometry, anchor, rotation_deg)
    for (px, py), k in zip(placed, kernels):
        kh, kw = k.size
        if px - kw // 2 < 0 or py - kh // 2 < 0 or px + kw // 2 >= width or py + kh // 2 >= height:
            raise PlacementError("placement rejected: object leaves the scene")
        if not em.is_sea(px, py):
            raise PlacementError("placement rejected: point off the sea entity")

    raster = scene.background.copy()
    x0 = y0 = math.inf
    x1 = y1 = -math.inf
    for (px, py), k in zip(placed, kernels):
        kh, kw = k.size
        stamp = np.clip(np.floor(render_kernel(k) + 0.5), 0, 255).astype(np.uint8)
        window = raster[py - kh // 2:py + kh // 2 + 1, px - kw // 2:px + kw // 2 + 1]
        np.maximum(window, stamp, out=window)
        hd = max(k.half_diagonal, 0.5)
        cx, cy = px + 0.5, py + 0.5
        x0, y0 = min(x0, cx - hd), min(y0, cy - hd)
        x1, y1 = max(x1, cx + hd), max(y1, cy + hd)
    box = PixelBBox(x0, y0, x1, y1).clipped(width, height)
    obj = SynthObject(ObjectClass(cls), geometry, tuple(anchor), float(rotation_deg),
                      tuple(kernels), placed, box)
    label = Label.from_pixel_box(cls, box, width, height)
    return SynthScene(raster, em, scene.objects + (obj,), scene.labels + (label,),
                      scene.background_index)


@dataclass(frozen=True)
class ClassBalance:
    cls: ObjectClass
    real: int
    target: int
    synthetic: int


@dataclass(frozen=True)
class GenerationManifest:
    classes: tuple
    seed: int = 0

    def needed(self, cls: ObjectClass) -> int:
        return sum(c.synthetic for c in self.classes if c.cls == cls)

    @property
    def total(self) -> int:
        return sum(c.synthetic for c in self.classes)

    def to_dict(self) -> dict:
        return {
            "classes": [{"class_id": int(c.cls), "real": c.real, "target": c.target,
                         "synthetic": c.synthetic} for c in self.classes],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationManifest":
        entries = []
        for rec in data["classes"]:
            entry = ClassBalance(ObjectClass.from_id(rec["class_id"]), int(rec.get("real", 0)),
                                 int(rec.get("target", 0)), int(rec["synthetic"]))
            if entry.synthetic < 0:
                raise ValueError("synthetic counts must be non-negative")
            entries.append(entry)
        return cls(tuple(entries), int(data.get("seed", 0)))

    @classmethod
    def from_json(cls, path) -> "GenerationManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def balance_manifest(real_counts: dict, targets: dict, seed: int = 0) -> GenerationManifest:
    entries = []
    for c in sorted(set(real_counts) | set(targets), key=int):
        real, target = int(real_counts.get(c, 0)), int(targets.get(c, 0))
        if real < 0 or target < 0:
            raise ValueError("counts must be non-negative")
        entries.append(ClassBalance(ObjectClass(c), real, target, max(0, target - real)))
    return GenerationManifest(tuple(entries), seed)


@dataclass(frozen=True)
class GenerationParams:
    anchor_spacing: int = 64
    objects_per_scene: tuple = (1, 5)
    anchor_retries: int = 20
    scene_attempts: int = 10
    reject_threshold: int = 120
    cluster: ClusterParams = field(default_factory=ClusterParams)
    kernel_sizes: dict = field(default_factory=lambda: dict(DEFAULT_KERNEL_SIZES))


def _boxes_overlap(a: PixelBBox, b: PixelBBox) -> bool:
    return a.x0 < b.x1 and b.x0 < a.x1 and a.y0 < b.y1 and b.y0 < a.y1


def _try_scene(chunk, background, em, rng, params, cfg):
    scene = SynthScene(background, em)
    grid = make_anchor_grid(em, params.anchor_spacing, rng)
    order = rng.permutation(len(grid.points))
    used = 0
    for cls in chunk:
        if cls == ObjectClass.PLATFORM_CLUSTER:
            geometry = gen_cluster_geometry(params.cluster, rng)
        else:
            geometry = gen_point_geometry(cls)
        kernels = [random_kernel(cls, rng, cfg, params.kernel_sizes) for _ in geometry.points]
        for _ in range(params.anchor_retries):
            if used >= len(order):
                return None
            anchor = grid.points[order[used]]
            used += 1
            rotation = float(rng.uniform(0.0, 360.0))
            try:
                candidate = place_object(scene, cls, geometry, anchor, rotation, kernels)
            except PlacementError:
                continue
            new_box = candidate.objects[-1].box_px
            if any(_boxes_overlap(new_box, o.box_px) for o in scene.objects):
                continue
            scene = candidate
            break
        else:
            return None
    return scene


def plan_scenes(manifest: GenerationManifest, seed: int, params: GenerationParams = GenerationParams()) -> list:
    """Split the requested objects into per-scene class lists (deterministic in ``seed``)."""
    rng = np.random.default_rng(seed)
    pool = []
    for c in FILE_CLASSES:
        pool.extend([c] * manifest.needed(c))
    pool = [pool[i] for i in rng.permutation(len(pool))]
    lo, hi = params.objects_per_scene
    chunks, pos = [], 0
    while pos < len(pool):
        k = int(rng.integers(lo, hi + 1))
        chunks.append(tuple(pool[pos:pos + k]))
        pos += k
    return chunks


def generate_scene(scene_index: int, chunk, accepted, seed: int, params: GenerationParams,
                   cfg: PipelineConfig) -> SynthScene:
    rng = np.random.default_rng([seed, scene_index])
    for _ in range(params.scene_attempts):
        bi = int(rng.integers(len(accepted)))
        index, background, em = accepted[bi]
        scene = _try_scene(chunk, background, em, rng, params, cfg)
        if scene is not None:
            return SynthScene(scene.background, em, scene.objects, scene.labels, index)
    raise GenerationError(f"scene {scene_index}: could not place {len(chunk)} objects "
                          f"after {params.scene_attempts} attempts")


def iter_dataset(manifest: GenerationManifest, backgrounds, cfg: PipelineConfig = PipelineConfig(),
                 seed: Optional[int] = None, params: GenerationParams = GenerationParams(),
                 workers: int = 1) -> Iterator[tuple]:
    """Yield ``(scene_index, SynthScene)`` covering exactly the manifest's synthetic counts.

    Each scene draws from its own stream seeded by ``(seed, scene_index)``,
    so ``workers > 1`` produces the same scenes as a serial run.
    """
    seed = manifest.seed if seed is None else seed
    chunks = plan_scenes(manifest, seed, params)
    if not chunks:
        return
    accepted = []
    for i, (raster, em) in enumerate(backgrounds):
        raster = as_raster8(raster)
        if screen_background(raster, em, params.reject_threshold):
            accepted.append((i, raster, em))
    if not accepted:
        raise GenerationError("no accepted backgrounds")

    def work(i):
        return generate_scene(i, chunks[i], accepted, seed, params, cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from enumerate(pool.map(work, range(len(chunks))))
    else:
        for i in range(len(chunks)):
            yield i, work(i)


def scene_files(index: int, scene: SynthScene) -> dict:
    """File name -> bytes for one generated image-label pair."""
    stem = f"synth_{index:06d}"
    return {f"{stem}.pgm": encode_pgm(scene.background), f"{stem}.txt": scene.label_text().encode("ascii")}


def generate_dataset(manifest: GenerationManifest, backgrounds, out_dir, cfg: PipelineConfig = PipelineConfig(),
                     seed: Optional[int] = None, params: GenerationParams = GenerationParams(),
                     workers: int = 1) -> dict:
    """Write image-label pairs to ``out_dir``; returns emitted label counts per class."""
    out = Path(out_dir)
    counts = {c: 0 for c in FILE_CLASSES}
    for index, scene in iter_dataset(manifest, backgrounds, cfg, seed, params, workers):
        out.mkdir(parents=True, exist_ok=True)
        for name, data in scene_files(index, scene).items():
            (out / name).write_bytes(data)
        for obj in scene.objects:
            counts[obj.cls] += 1
    return counts


def dataset_digest(manifest, backgrounds, cfg=PipelineConfig(), seed=None, params=GenerationParams()) -> str:
    """SHA-256 over all file names and bytes a run would write."""
    digest = hashlib.sha256()
    for index, scene in iter_dataset(manifest, backgrounds, cfg, seed, params):
        for name, data in scene_files(index, scene).items():
            digest.update(name.encode())
            digest.update(data)
    return digest.hexdigest()


def synthetic_background(width: int, height: int, rng=None, land_fraction: float = 0.0,
                         cfg: PipelineConfig = PipelineConfig()):
    """Dark, textured sea with an optional land strip; returns ``(raster8, land_mask)``.

    Sea is drawn around -28 dB and capped at -22 dB, which keeps it below the
    default screening threshold. Land sits around -8 dB.
    """
    rng, _ = _as_rng(rng)
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (height, width)), 2.0)
    texture /= texture.std() or 1.0
    db = np.clip(-28.0 + 1.5 * texture + rng.normal(0.0, 0.5, (height, width)), -40.0, -22.0)
    land = np.zeros((height, width), dtype=bool)
    if land_fraction > 0:
        side = int(rng.integers(4))
        depth = land_fraction * (width if side % 2 == 0 else height)
        along = np.arange(height if side % 2 == 0 else width)
        wobble = ndimage.gaussian_filter1d(rng.normal(0.0, 1.0, along.size), 25.0)
        edge = depth + wobble / (np.abs(wobble).max() or 1.0) * 0.1 * depth
        yy, xx = np.mgrid[0:height, 0:width]
        if side == 0:
            land = xx < edge[yy]
        elif side == 1:
            land = yy < edge[xx]
        elif side == 2:
            land = (width - 1 - xx) < edge[yy]
        else:
            land = (height - 1 - yy) < edge[xx]
        db = np.where(land, np.clip(-8.0 + 3.0 * texture, -40.0, 0.0), db)
    return quantize_db(RasterF(db), cfg), land
