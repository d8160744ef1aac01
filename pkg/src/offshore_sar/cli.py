"""Command line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 pipeline/data error, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import evaluate, pipeline, postprocess, preprocess, synthgen
from .core import FILE_CLASSES, GeoTransform, Label, PipelineConfig
from .fileio import read_geotransform_json, read_pgm, read_raster_f, write_jsonl, write_pgm, write_raster_f

log = logging.getLogger("offshore_sar")

CONFIG_ENV = "OFFSHORE_SAR_CONFIG"
EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise UsageError(f"input path does not exist: {p}")


def _parse_value(field_type, raw: str):
    if field_type in (int, "int"):
        return int(raw)
    return float(raw)


def load_config(args) -> PipelineConfig:
    """Config file (``--config`` or the env var), then ``--set key=value`` overrides."""
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    try:
        cfg = PipelineConfig()
        if path:
            _require(path)
            cfg = PipelineConfig.from_json(path)
        return apply_overrides(cfg, getattr(args, "set", None))
    except (ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def apply_overrides(cfg: PipelineConfig, items) -> PipelineConfig:
    overrides = {}
    types = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or key not in types:
            raise UsageError(f"bad --set override {item!r}")
        overrides[key] = _parse_value(types[key], raw)
    return cfg.override(**overrides)


def cmd_composite(args):
    _require(args.stack)
    stack = pipeline.load_stack(args.stack)
    write_raster_f(args.out, preprocess.median_composite(stack))
    log.info("composited %d rasters into %s", len(stack), args.out)


def cmd_quantize(args):
    _require(args.inp)
    cfg = load_config(args)
    write_pgm(args.out, preprocess.quantize_db(read_raster_f(args.inp), cfg))


def cmd_grid(args):
    cfg = load_config(args)
    tiles = preprocess.make_grid(tuple(args.roi), cfg)
    payload = [{"tile_id": t.tile_id, "bounds_m": list(t.bounds_m), "geotransform": t.geotransform.to_list(),
                "crs": t.geotransform.crs} for t in tiles]
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_chip(args):
    _require(args.inp, args.gt)
    cfg = load_config(args)
    gt, tile_id = read_geotransform_json(args.gt)
    tile_id = args.tile_id or tile_id or Path(args.inp).stem
    chips = preprocess.chip_tile(read_pgm(args.inp), gt, tile_id, cfg)
    preprocess.write_chips(chips, args.out)
    log.info("wrote %d chips to %s", len(chips), args.out)


def load_backgrounds(directory, cfg):
    """``*.pgm`` backgrounds with optional ``{stem}.land.pgm`` masks (non-zero = land)."""
    out = []
    for path in sorted(Path(directory).glob("*.pgm")):
        if path.name.endswith(".land.pgm"):
            continue
        raster = read_pgm(path)
        mask_path = path.with_name(path.stem + ".land.pgm")
        land = read_pgm(mask_path) > 0 if mask_path.exists() else (raster != raster)
        out.append((raster, synthgen.build_entity_map(land, cfg)))
    return out


def cmd_synth(args):
    _require(args.manifest, args.backgrounds)
    cfg = load_config(args)
    manifest = synthgen.GenerationManifest.from_json(args.manifest)
    backgrounds = load_backgrounds(args.backgrounds, cfg)
    counts = synthgen.generate_dataset(manifest, backgrounds, args.out, cfg, seed=args.seed, workers=args.workers)
    for c, n in counts.items():
        log.info("%s: %d labels", c.label, n)


def cmd_balance(args):
    real = dict(zip(FILE_CLASSES, args.real))
    target = dict(zip(FILE_CLASSES, args.target))
    manifest = synthgen.balance_manifest(real, target, args.seed)
    text = json.dumps(manifest.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


BARE_PIXEL_DEG = 1e-5


def load_chip_rasters(directory) -> dict:
    """Chips with sidecars, plus bare ``*.pgm`` images.

    Bare images get synthetic side-by-side placements (``BARE_PIXEL_DEG``
    per pixel, one pixel gap) so detections from different images never
    overlap during deduplication.
    """
    chips = preprocess.load_chips(directory)
    lon = -180.0
    for path in sorted(Path(directory).glob("*.pgm")):
        if path.stem in chips or path.name.endswith(".land.pgm"):
            continue
        raster = read_pgm(path)
        gt = GeoTransform(lon, BARE_PIXEL_DEG, 0.0, 0.0, 0.0, -BARE_PIXEL_DEG, crs="LOCAL")
        chips[path.stem] = preprocess.Chip(path.stem, "", raster, (0, 0), gt)
        lon += (raster.shape[1] + 1) * BARE_PIXEL_DEG
        if lon > 180.0:
            raise ValueError(f"too many bare images in {directory} to place side by side")
    return chips


def cmd_oracle_detect(args):
    chips_dir = args.chips or args.labels
    _require(args.labels, chips_dir)
    cfg = load_config(args)
    chips = load_chip_rasters(chips_dir)
    labels = {}
    for path in sorted(Path(args.labels).glob("*.txt")):
        if path.stem not in chips:
            raise ValueError(f"labels {path.name} have no matching chip in {chips_dir}")
        labels[path.stem] = [Label.from_line(line) for line in path.read_text().splitlines() if line.strip()]
    dets = evaluate.oracle_detector(labels, chips, args.jitter, args.dropout, args.spurious, args.seed, cfg)
    write_jsonl(args.out, (d.to_record() for d in dets))
    log.info("wrote %d detections to %s", len(dets), args.out)


def cmd_postprocess(args):
    _require(args.dets, args.chips)
    cfg = load_config(args)
    chips = load_chip_rasters(args.chips)
    cleaned = postprocess.postprocess_run(pipeline.read_detections(args.dets), chips, cfg)
    Path(args.out).write_bytes(postprocess.export_geojson(cleaned))
    log.info("kept %d detections", len(cleaned))


def _load_preds(path, chips_dir):
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{") and '"FeatureCollection"' in stripped[:200]:
        return postprocess.read_geojson(text)
    dets = postprocess.assign_ids(pipeline.read_detections(path))
    if chips_dir:
        dets = postprocess.geolocate_all(dets, preprocess.load_chips(chips_dir))
    return dets


def cmd_evaluate(args):
    _require(args.preds, args.gt, args.chips)
    cfg = load_config(args)
    preds = _load_preds(args.preds, args.chips)
    gts = pipeline.read_ground_truth(args.gt)
    payload = evaluate.build_report(preds, gts, cfg, merge=args.merge, dataset=args.dataset, model=args.model)
    if args.report:
        Path(args.report).write_text(json.dumps(payload, indent=2) + "\n")
    sys.stdout.write(evaluate.format_table(payload))


def cmd_report(args):
    _require(args.report)
    try:
        payload = json.loads(Path(args.report).read_text())
        table = evaluate.format_table(payload)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"malformed report {args.report}: {exc}") from exc
    sys.stdout.write(table)


def cmd_pipeline(args):
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        raise UsageError("pipeline needs --config or $" + CONFIG_ENV)
    _require(path)
    try:
        run = pipeline.RunConfig.from_json(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid run config {path}: {exc}") from exc
    try:
        run.pipeline = apply_overrides(run.pipeline, args.set)
    except ValueError as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    if args.workdir:
        run.workdir = Path(args.workdir)
    missing = run.missing_inputs()
    if missing:
        raise UsageError(f"input path does not exist: {missing[0]}")
    logging.getLogger().setLevel(run.log_level.upper())
    result = pipeline.run_pipeline(run)
    if "merged_classes" in result:
        sys.stdout.write(evaluate.format_table(result))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="offshore-sar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        if config:
            p.add_argument("--config", help=f"pipeline config JSON (default: ${CONFIG_ENV})")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one pipeline config value; may repeat")
        return p

    p = add("composite", cmd_composite, "median-composite a directory of .npz dB rasters", config=False)
    p.add_argument("--stack", required=True)
    p.add_argument("--out", required=True)

    p = add("quantize", cmd_quantize, "clip and map a dB raster to 8-bit PGM")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = add("grid", cmd_grid, "overlapping tile grid over a planar ROI in metres")
    p.add_argument("--roi", type=float, nargs=4, required=True, metavar=("X0", "Y0", "X1", "Y1"))
    p.add_argument("--out")

    p = add("chip", cmd_chip, "cut a tile into overlapping chips")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--gt", required=True, help="JSON with geotransform [a..f] and optional tile_id")
    p.add_argument("--out", required=True)
    p.add_argument("--tile-id")

    p = add("synth", cmd_synth, "generate synthetic image-label pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backgrounds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)

    p = add("balance", cmd_balance, "write a class-balancing manifest", config=False)
    p.add_argument("--real", type=int, nargs=3, required=True, metavar=("SINGLE", "CLUSTER", "TURBINE"))
    p.add_argument("--target", type=int, nargs=3, required=True, metavar=("SINGLE", "CLUSTER", "TURBINE"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = add("oracle-detect", cmd_oracle_detect, "noisy detections derived from labels")
    p.add_argument("--labels", required=True, help="directory of {chip_id}.txt label files")
    p.add_argument("--chips", help="chip directory (default: the labels directory)")
    p.add_argument("--jitter", type=float, default=2.0)
    p.add_argument("--dropout", type=float, default=0.05)
    p.add_argument("--spurious", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("postprocess", cmd_postprocess, "filter, geolocate and deduplicate detections")
    p.add_argument("--dets", required=True)
    p.add_argument("--chips", required=True)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "score detections against ground truth")
    p.add_argument("--preds", required=True, help="GeoJSON from postprocess or detector JSON Lines")
    p.add_argument("--gt", required=True)
    p.add_argument("--chips", help="chip directory, to geolocate JSON Lines predictions")
    p.add_argument("--merge", action="store_true", help="merge platform classes before matching")
    p.add_argument("--report")
    p.add_argument("--dataset")
    p.add_argument("--model")

    p = add("report", cmd_report, "render a report JSON as a text table", config=False)
    p.add_argument("report")

    p = add("pipeline", cmd_pipeline, "run every stage from a run config", config=False)
    p.add_argument("--config", help=f"run config JSON (default: ${CONFIG_ENV})")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--workdir")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError, KeyError, synthgen.GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
