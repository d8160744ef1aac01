import numpy as np
import pytest

from offshore_sar import synthgen
from offshore_sar.core import PixelBBox


@pytest.fixture(scope="session")
def backgrounds_640():
    rng = np.random.default_rng(1234)
    out = []
    for i in range(6):
        raster, land = synthgen.synthetic_background(640, 640, rng, land_fraction=0.2 if i % 2 else 0.0)
        out.append((raster, synthgen.build_entity_map(land)))
    return out


def replay_footprints(scene, backgrounds):
    """Restamp a scene object by object; yield (object, label box, changed-pixel coordinates)."""
    raster, em = backgrounds[scene.background_index]
    replay = synthgen.SynthScene(np.asarray(raster, dtype=np.uint8), em)
    h, w = replay.background.shape
    for obj, label in zip(scene.objects, scene.labels):
        before = replay.background
        replay = synthgen.place_object(replay, obj.cls, obj.geometry, obj.anchor, obj.rotation_deg, obj.kernels)
        ys, xs = np.nonzero(replay.background > before)
        yield obj, label.to_pixel_box(w, h), xs, ys
    assert np.array_equal(replay.background, scene.background)


def centres_inside(box: PixelBBox, xs, ys, tol=1e-3) -> bool:
    cx, cy = xs + 0.5, ys + 0.5
    return bool(np.all((cx >= box.x0 - tol) & (cx <= box.x1 + tol) & (cy >= box.y0 - tol) & (cy <= box.y1 + tol)))


_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion the test belongs to")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = _ACCEPTANCE.get(report.nodeid)
    if marker is None:
        return
    n, title = marker
    entry = _RESULTS.setdefault(n, {"title": title, "passed": 0, "failed": []})
    if report.outcome == "passed":
        entry["passed"] += 1
    else:
        entry["failed"].append(report.nodeid.split("::")[-1])


_RESULTS = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _ACCEPTANCE[item.nodeid] = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        status = "FAIL" if r["failed"] else "PASS"
        line = f"criterion {n} {status}: {r['title']} ({r['passed']} passed, {len(r['failed'])} failed)"
        if r["failed"]:
            line += " failing: " + ", ".join(r["failed"])
        terminalreporter.write_line(line)
