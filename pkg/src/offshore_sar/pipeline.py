"""End-to-end runs: config-driven pipeline and the synthetic closed loop."""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import evaluate, postprocess, preprocess, synthgen
from .core import FILE_CLASSES, Detection, GeoTransform, PipelineConfig, RasterF, geolocate
from .fileio import read_jsonl, read_raster_f, write_jsonl, write_pgm, write_raster_f

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass
class RunConfig:
    """Everything a ``pipeline`` run needs.

    JSON layout::

        {"workdir": "...", "seed": 0, "parallelism": 1, "log_level": "INFO",
         "merge": true, "gt": "gt.jsonl",
         "tiles": [{"tile_id": "T0", "stack_dir": "...", "geotransform": [a, b, c, d, e, f]}],
         "detector": {"kind": "oracle", "jitter": 2, "dropout": 0.05, "spurious": 0.05}
                     | {"kind": "command", "command": "my-detector {chips_dir} {out_jsonl}"},
         "pipeline": {...PipelineConfig overrides...}}

    Relative paths resolve against the config file's directory.
    """

    workdir: Path
    tiles: list
    gt: Optional[Path] = None
    seed: int = 0
    parallelism: int = 1
    log_level: str = "INFO"
    merge: bool = True
    detector: dict = field(default_factory=lambda: {"kind": "oracle"})
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        path = Path(path)
        data = json.loads(path.read_text())
        base = path.parent

        def resolve(p):
            return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

        tiles = []
        for t in data.get("tiles", []):
            tiles.append({"tile_id": str(t["tile_id"]), "stack_dir": resolve(t["stack_dir"]),
                          "geotransform": GeoTransform.from_list(t["geotransform"], t.get("crs", "EPSG:4326"))})
        if not tiles:
            raise ValueError("run config lists no tiles")
        cfg = cls(
            workdir=resolve(data.get("workdir", "work")),
            tiles=tiles,
            gt=resolve(data.get("gt")),
            seed=int(data.get("seed", 0)),
            parallelism=int(data.get("parallelism", 1)),
            log_level=str(data.get("log_level", "INFO")),
            merge=bool(data.get("merge", True)),
            detector=dict(data.get("detector", {"kind": "oracle"})),
            pipeline=PipelineConfig.from_dict(data.get("pipeline", {})),
        )
        if cfg.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        return cfg

    def missing_inputs(self) -> list:
        paths = [t["stack_dir"] for t in self.tiles]
        if self.gt is not None:
            paths.append(self.gt)
        return [p for p in paths if not Path(p).exists()]


def load_stack(stack_dir) -> list:
    files = sorted(Path(stack_dir).glob("*.npz"))
    if not files:
        raise FileNotFoundError(f"no .npz rasters in {stack_dir}")
    return [read_raster_f(f) for f in files]


def read_detections(path) -> list:
    return [Detection.from_record(rec) for rec in read_jsonl(path)]


def read_ground_truth(path) -> list:
    return [evaluate.GroundTruth.from_record(rec) for rec in read_jsonl(path)]


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            log.info("stage %s", name)
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except (OSError, ValueError, KeyError, subprocess.CalledProcessError) as exc:
                raise StageError(name, str(exc)) from exc
        return run
    return wrap


@_stage("composite")
def _composite(tile, work: Path) -> Path:
    out = work / "composites" / f"{tile['tile_id']}.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_raster_f(out, preprocess.median_composite(load_stack(tile["stack_dir"])))
    return out


@_stage("quantize")
def _quantize(tile, composite: Path, work: Path, cfg: PipelineConfig) -> Path:
    out = work / "quantized" / f"{tile['tile_id']}.pgm"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, preprocess.quantize_db(read_raster_f(composite), cfg))
    return out


@_stage("chip")
def _chip(tile, quantized: Path, chips_dir: Path, cfg: PipelineConfig) -> list:
    from .fileio import read_pgm
    chips = preprocess.chip_tile(read_pgm(quantized), tile["geotransform"], tile["tile_id"], cfg)
    preprocess.write_chips(chips, chips_dir)
    return chips


@_stage("detect")
def _detect(run: RunConfig, chips: dict, chips_dir: Path, out_jsonl: Path) -> None:
    det = run.detector
    kind = det.get("kind", "oracle")
    if kind == "command":
        cmd = det["command"].format(chips_dir=shlex.quote(str(chips_dir)), out_jsonl=shlex.quote(str(out_jsonl)))
        subprocess.run(shlex.split(cmd), check=True)
        if not out_jsonl.exists():
            raise FileNotFoundError(f"detector did not write {out_jsonl}")
        return
    if kind != "oracle":
        raise ValueError(f"unknown detector kind {kind!r}")
    if run.gt is None:
        raise ValueError("the oracle detector needs ground truth ('gt')")
    gts = read_ground_truth(run.gt)
    labels = evaluate.labels_for_chips([(g.cls, g.box) for g in gts if g.frame == "geo"], chips)
    labels_dir = chips_dir.parent / "labels"
    labels_dir.mkdir(parents=True, exist_ok=True)
    for cid, labs in labels.items():
        (labels_dir / f"{cid}.txt").write_text("".join(lab.to_line() + "\n" for lab in labs))
    dets = evaluate.oracle_detector(labels, chips, det.get("jitter", 2.0), det.get("dropout", 0.05),
                                    det.get("spurious", 0.05), run.seed, run.pipeline)
    write_jsonl(out_jsonl, (d.to_record() for d in dets))


@_stage("postprocess")
def _postprocess(dets_path: Path, chips: dict, out: Path, cfg: PipelineConfig) -> list:
    cleaned = postprocess.postprocess_run(read_detections(dets_path), chips, cfg)
    out.write_bytes(postprocess.export_geojson(cleaned))
    return cleaned


@_stage("evaluate")
def _evaluate(run: RunConfig, cleaned: list, work: Path) -> dict:
    gts = read_ground_truth(run.gt)
    payload = evaluate.build_report(cleaned, gts, run.pipeline, merge=run.merge)
    (work / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    (work / "report.txt").write_text(evaluate.format_table(payload))
    return payload


def run_pipeline(run: RunConfig) -> dict:
    """composite -> quantize -> chip -> detect -> postprocess -> evaluate."""
    work = Path(run.workdir)
    work.mkdir(parents=True, exist_ok=True)
    chips_dir = work / "chips"
    cfg = run.pipeline

    def prepare(tile):
        composite = _composite(tile, work)
        quantized = _quantize(tile, composite, work, cfg)
        return _chip(tile, quantized, chips_dir, cfg)

    with ThreadPoolExecutor(max_workers=run.parallelism) as pool:
        per_tile = list(pool.map(prepare, run.tiles))
    chips = {c.chip_id: c for tile_chips in per_tile for c in tile_chips}

    dets_path = work / "detections.jsonl"
    _detect(run, chips, chips_dir, dets_path)
    cleaned = _postprocess(dets_path, chips, work / "detections.geojson", cfg)
    if run.gt is None:
        return {"detections": len(cleaned)}
    return _evaluate(run, cleaned, work)


# ---------------------------------------------------------------------------
# synthetic closed loop


@dataclass
class LoopResult:
    report: evaluate.MatchReport
    metrics: dict
    n_scenes: int
    n_objects: int
    n_raw_detections: int
    n_clean_detections: int


def closed_loop(n_scenes: int = 200, scene_size: int = 1024, seed: int = 0, jitter: float = 2.0,
                dropout: float = 0.05, spurious: float = 0.05, cfg: PipelineConfig = PipelineConfig(),
                params: synthgen.GenerationParams = synthgen.GenerationParams(),
                n_backgrounds: int = 8) -> LoopResult:
    """Synthetic scenes -> chips -> oracle detector -> postprocess -> merged evaluation.

    Every scene is treated as one tile laid out on its own patch of the
    globe, so cross-chip duplicates are resolved in geographic space.
    """
    rng = np.random.default_rng(seed)
    backgrounds = []
    for i in range(n_backgrounds):
        raster, land = synthgen.synthetic_background(scene_size, scene_size, rng,
                                                     land_fraction=0.15 if i % 2 else 0.0, cfg=cfg)
        backgrounds.append((raster, synthgen.build_entity_map(land, cfg)))

    per_scene = []
    lo, hi = params.objects_per_scene
    for s in range(n_scenes):
        k = int(rng.integers(lo, hi + 1))
        per_scene.append(tuple(FILE_CLASSES[int(rng.integers(3))] for _ in range(k)))
    accepted = [(i, r, em) for i, (r, em) in enumerate(backgrounds)
                if synthgen.screen_background(r, em, params.reject_threshold)]

    pixel = 1e-4
    chips, labels, gts = {}, {}, []
    for s, chunk in enumerate(per_scene):
        scene = synthgen.generate_scene(s, chunk, accepted, seed, params, cfg)
        gt = GeoTransform(-60.0 + 0.25 * (s % 40), pixel, 0.0, 40.0 - 0.25 * (s // 40), 0.0, -pixel)
        tile_id = f"S{s:04d}"
        for chip in preprocess.chip_tile(scene.background, gt, tile_id, cfg):
            chips[chip.chip_id] = chip
        for obj in scene.objects:
            gts.append(evaluate.GroundTruth(geolocate(obj.box_px, gt), obj.cls, region=tile_id))
    labels = evaluate.labels_for_chips([(g.cls, g.box) for g in gts], chips)
    raw = evaluate.oracle_detector(labels, chips, jitter, dropout, spurious, rng, cfg)
    cleaned = postprocess.postprocess_run(raw, chips, cfg)
    report, metrics, _ = evaluate.evaluate_run(cleaned, gts, cfg, merge=True)
    return LoopResult(report, metrics, n_scenes, len(gts), len(raw), len(cleaned))


def simulate_stack(scene8: np.ndarray, n_frames: int = 7, seed: int = 0, transient_frames: int = 3,
                   n_transients: int = 5, cfg: PipelineConfig = PipelineConfig()) -> list:
    """dB frames of a static scene with bright transient targets in a few frames.

    Transients (ships) appear in at most ``transient_frames`` frames, so a
    median over ``n_frames >= 2 * transient_frames + 1`` removes them.
    """
    rng = np.random.default_rng(seed)
    base = preprocess.dequantize(scene8, cfg)
    frames = [base.copy() for _ in range(n_frames)]
    h, w = base.shape
    bright = np.zeros((n_frames, h, w), dtype=bool)
    for _ in range(n_transients):
        x, y = int(rng.integers(0, w - 8)), int(rng.integers(0, h - 8))
        for f in rng.choice(n_frames, size=transient_frames, replace=False):
            # overlapping patches must not light a pixel in more than transient_frames frames
            patch = np.zeros((h, w), dtype=bool)
            patch[y:y + 6, x:x + 6] = True
            patch &= bright.sum(axis=0) < transient_frames
            bright[f] |= patch
    for f in range(n_frames):
        frames[f][bright[f]] = -5.0
    return [RasterF(f) for f in frames]
