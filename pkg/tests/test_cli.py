import json
import subprocess
import sys

import numpy as np
import pytest

from offshore_sar import cli, evaluate, pipeline, preprocess, synthgen
from offshore_sar.core import RasterF
from offshore_sar.fileio import read_jsonl, read_pgm, read_raster_f, write_pgm, write_raster_f
from test_pipeline import TILE_GT, make_tile_inputs, write_run_config


@pytest.fixture(scope="module")
def tile(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    make_tile_inputs(root, seed=1)
    return root


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_stage_by_stage(tile, tmp_path, capsys):
    comp, q, chips = tmp_path / "c.npz", tmp_path / "q.pgm", tmp_path / "chips"
    assert run("composite", "--stack", tile / "stack", "--out", comp) == 0
    assert run("quantize", "--in", comp, "--out", q) == 0
    gt_json = tmp_path / "gt.json"
    gt_json.write_text(json.dumps({"tile_id": "T000_000", "geotransform": TILE_GT}))
    assert run("chip", "--in", q, "--gt", gt_json, "--out", chips) == 0
    assert len(list(chips.glob("*.pgm"))) == 4

    # labels per chip, then the oracle detector over them
    loaded = preprocess.load_chips(chips)
    gts = pipeline.read_ground_truth(tile / "gt.jsonl")
    labels_dir = tmp_path / "labels"
    labels_dir.mkdir()
    for cid, labs in evaluate.labels_for_chips([(g.cls, g.box) for g in gts], loaded).items():
        (labels_dir / f"{cid}.txt").write_text("".join(lab.to_line() + "\n" for lab in labs))
    dets = tmp_path / "dets.jsonl"
    assert run("oracle-detect", "--labels", labels_dir, "--chips", chips, "--out", dets,
               "--dropout", 0, "--spurious", 0.3, "--seed", 2) == 0
    assert len(list(read_jsonl(dets))) > len(gts)

    geojson = tmp_path / "clean.geojson"
    assert run("postprocess", "--dets", dets, "--chips", chips, "--out", geojson) == 0
    assert json.loads(geojson.read_text())["type"] == "FeatureCollection"

    report = tmp_path / "report.json"
    capsys.readouterr()
    assert run("evaluate", "--preds", geojson, "--gt", tile / "gt.jsonl", "--merge", "--report", report,
               "--dataset", "synthetic", "--model", "oracle") == 0
    table = capsys.readouterr().out
    assert "platform" in table and "synthetic" in table
    payload = json.loads(report.read_text())
    assert all(r["fp"] == 0 for r in payload["merged_classes"])

    # JSON Lines predictions are geolocated through the chip sidecars
    assert run("evaluate", "--preds", dets, "--chips", chips, "--gt", tile / "gt.jsonl") == 0

    assert run("report", report) == 0
    assert capsys.readouterr().out.splitlines()[0].startswith("Dataset")


def test_composite_matches_library(tile, tmp_path):
    out = tmp_path / "c.npz"
    assert run("composite", "--stack", tile / "stack", "--out", out) == 0
    frames = [read_raster_f(p) for p in sorted((tile / "stack").glob("*.npz"))]
    assert np.array_equal(read_raster_f(out).values, np.median(np.stack([f.values for f in frames]), axis=0))


def test_quantize_config_override(tmp_path):
    src = tmp_path / "r.npz"
    write_raster_f(src, RasterF(np.array([[-30.0, -10.0]])))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"db_lo": -30.0, "db_hi": -10.0}))
    assert run("quantize", "--in", src, "--out", tmp_path / "a.pgm", "--config", cfg) == 0
    assert read_pgm(tmp_path / "a.pgm").tolist() == [[0, 255]]
    # flags win over the file
    assert run("quantize", "--in", src, "--out", tmp_path / "b.pgm", "--config", cfg, "--set", "db_hi=0") == 0
    assert read_pgm(tmp_path / "b.pgm").tolist() == [[0, 170]]


def test_config_from_environment(tmp_path, monkeypatch):
    src = tmp_path / "r.npz"
    write_raster_f(src, RasterF(np.array([[-30.0, -10.0]])))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"db_lo": -30.0, "db_hi": -10.0}))
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
    assert run("quantize", "--in", src, "--out", tmp_path / "a.pgm") == 0
    assert read_pgm(tmp_path / "a.pgm").tolist() == [[0, 255]]


def test_grid_and_balance(tmp_path, capsys):
    assert run("grid", "--roi", 0, 0, 150000, 150000) == 0
    tiles = json.loads(capsys.readouterr().out)
    assert [t["tile_id"] for t in tiles] == ["T000_000", "T001_000", "T000_001", "T001_001"]
    out = tmp_path / "m.json"
    assert run("balance", "--real", 2330, 271, 2920, "--target", 2330, 2477, 2920, "--out", out) == 0
    m = synthgen.GenerationManifest.from_json(out)
    assert m.total == 2206


def test_synth_and_oracle_on_bare_images(tmp_path):
    bgs = tmp_path / "bg"
    bgs.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        raster, land = synthgen.synthetic_background(640, 640, rng, land_fraction=0.2)
        write_pgm(bgs / f"bg{i}.pgm", raster)
        write_pgm(bgs / f"bg{i}.land.pgm", land.astype(np.uint8) * 255)
    manifest = tmp_path / "m.json"
    assert run("balance", "--real", 0, 0, 0, "--target", 3, 4, 5, "--out", manifest) == 0
    out = tmp_path / "synth"
    assert run("synth", "--manifest", manifest, "--backgrounds", bgs, "--out", out, "--seed", 9) == 0
    lines = [ln for p in out.glob("*.txt") for ln in p.read_text().splitlines()]
    assert sorted(int(ln.split()[0]) for ln in lines) == [0] * 3 + [1] * 4 + [2] * 5
    dets = tmp_path / "d.jsonl"
    assert run("oracle-detect", "--labels", out, "--out", dets, "--dropout", 0, "--spurious", 0) == 0
    assert len(list(read_jsonl(dets))) == 12
    assert run("postprocess", "--dets", dets, "--chips", out, "--out", tmp_path / "c.geojson") == 0
    # objects in different images never merge
    assert len(json.loads((tmp_path / "c.geojson").read_text())["features"]) == 12


def test_pipeline_command(tile, tmp_path, monkeypatch, capsys):
    cfg = write_run_config(tile, workdir=str(tmp_path / "w"))
    assert run("pipeline", "--config", cfg, "--set", "dedup_iou=0.25") == 0
    assert "platform" in capsys.readouterr().out
    assert (tmp_path / "w" / "report.json").exists()
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
    assert run("pipeline", "--workdir", tmp_path / "w2") == 0


def test_exit_codes(tile, tmp_path, capsys):
    missing = tmp_path / "does-not-exist"
    assert run("composite", "--stack", missing, "--out", tmp_path / "x.npz") == 2
    assert str(missing) in capsys.readouterr().err
    bad_cfg = write_run_config(tile, workdir=str(tmp_path / "w"), gt=str(missing))
    assert run("pipeline", "--config", bad_cfg) == 2
    assert str(missing) in capsys.readouterr().err
    assert run("quantize", "--in", tile / "gt.jsonl", "--out", tmp_path / "q.pgm", "--set", "nope=1") == 2
    assert run("quantize", "--in", tile / "gt.jsonl", "--out", tmp_path / "q.pgm", "--set", "chip_overlap=1") == 2
    # data errors exit 1
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run("composite", "--stack", empty, "--out", tmp_path / "x.npz") == 1
    broken = write_run_config(tile, workdir=str(tmp_path / "w3"),
                              tiles=[{"tile_id": "X", "stack_dir": str(empty), "geotransform": TILE_GT}])
    assert run("pipeline", "--config", broken) == 1
    assert "composite" in capsys.readouterr().err


def test_report_rejects_bad_input(tmp_path):
    bad = tmp_path / "r.json"
    bad.write_text("{not json")
    assert run("report", bad) == 2
    bad.write_text(json.dumps({"classes": [{"class_id": 9, "gt": 1, "tp": 1, "fp": 0, "fn": 0}]}))
    assert run("report", bad) == 2


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "offshore_sar.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("composite", "quantize", "grid", "chip", "synth", "balance", "oracle-detect", "postprocess",
                "evaluate", "report", "pipeline"):
        assert cmd in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "offshore_sar.cli", "frobnicate"], capture_output=True)
    assert proc.returncode == 2
