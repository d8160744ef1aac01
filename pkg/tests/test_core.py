import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from offshore_sar.core import (FILE_CLASSES, Detection, GeoBBox, GeoTransform, Label, ObjectClass, PipelineConfig,
                               PixelBBox, RasterF, as_raster8, geolocate, iou, merge_class, pixel_box_of)

coord = st.floats(-500, 500, allow_nan=False)
size = st.floats(0.5, 200, allow_nan=False)


@st.composite
def pixel_boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(size), draw(size)
    return PixelBBox(x, y, x + w, y + h)


def test_class_ids():
    assert [int(c) for c in FILE_CLASSES] == [0, 1, 2]
    assert ObjectClass.from_id(2) is ObjectClass.WIND_TURBINE
    for bad in (3, -1, 1.5, True):
        with pytest.raises(ValueError):
            ObjectClass.from_id(bad)
    assert merge_class(ObjectClass.PLATFORM_CLUSTER) is ObjectClass.PLATFORM
    assert merge_class(ObjectClass.WIND_TURBINE) is ObjectClass.WIND_TURBINE


def test_raster_checks():
    with pytest.raises(ValueError):
        RasterF(np.zeros((0, 3)))
    r = RasterF(np.array([[1.0, -9999.0, np.nan]]), nodata=-9999.0)
    assert r.valid_mask().tolist() == [[True, False, False]]
    with pytest.raises(ValueError):
        as_raster8(np.array([[256]]))
    assert as_raster8(np.array([[0, 255]])).dtype == np.uint8


def test_geotransform_singular():
    with pytest.raises(ValueError, match="singular"):
        GeoTransform(0, 1, 2, 0, 0.5, 1)


@given(st.floats(-170, 170), st.floats(1e-5, 1e-2), st.floats(-1e-4, 1e-4), st.floats(-80, 80),
       st.floats(-1e-4, 1e-4), st.floats(-1e-2, -1e-5), st.floats(0, 5000), st.floats(0, 5000))
def test_geotransform_roundtrip(a, b, c, d, e, f, col, row):
    assume(abs(b * f - c * e) > 1e-12)
    gt = GeoTransform(a, b, c, d, e, f)
    back = gt.inverse_apply(*gt.apply(col, row))
    assert back == pytest.approx((col, row), abs=1e-4)


def test_translated_is_exact_with_fractions():
    gt = GeoTransform(Fraction(3), Fraction(1, 3), Fraction(1, 7), Fraction(50), Fraction(1, 11), Fraction(-1, 3))
    sub = gt.translated(512, 1024)
    for col, row in [(0, 0), (17, 99), (639, 639)]:
        assert sub.apply(col, row) == gt.apply(col + 512, row + 1024)


def test_box_validation_and_clip():
    with pytest.raises(ValueError):
        PixelBBox(1, 0, 1, 2)
    with pytest.raises(ValueError):
        GeoBBox(0, 0, 1, 91)
    b = PixelBBox(-5, 10, 20, 700)
    assert b.clipped(640, 640).as_tuple() == (0, 10, 20, 640)
    assert PixelBBox(700, 0, 710, 5).clipped(640, 640) is None


@given(pixel_boxes(), pixel_boxes())
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == 1.0


def test_iou_value():
    assert iou(PixelBBox(0, 0, 10, 10), PixelBBox(5, 0, 15, 10)) == pytest.approx(1 / 3)
    assert iou(PixelBBox(0, 0, 1, 1), PixelBBox(1, 0, 2, 1)) == 0.0


@given(pixel_boxes())
def test_geolocate_roundtrip(box):
    gt = GeoTransform(10.0, 1e-4, 0.0, 50.0, 0.0, -1e-4)
    back = pixel_box_of(geolocate(box, gt), gt)
    assert back.as_tuple() == pytest.approx(box.as_tuple(), abs=1e-6)


def test_geolocate_north_up_flips_rows():
    gt = GeoTransform(10.0, 0.5, 0.0, 50.0, 0.0, -0.5)
    g = geolocate(PixelBBox(0, 0, 2, 4), gt)
    assert g.as_tuple() == (10.0, 48.0, 11.0, 50.0)


@given(st.sampled_from(FILE_CLASSES), pixel_boxes())
def test_label_from_box_is_clipped_and_roundtrips(cls, box):
    w, h = 640, 480
    clipped = box.clipped(w, h)
    assume(clipped is not None and clipped.x1 - clipped.x0 > 1e-3 and clipped.y1 - clipped.y0 > 1e-3)
    label = Label.from_pixel_box(cls, box, w, h)
    assert label.to_pixel_box(w, h).as_tuple() == pytest.approx(clipped.as_tuple(), abs=1e-9)
    parsed = Label.from_line(label.to_line())
    assert parsed.cls == cls
    assert parsed.to_pixel_box(w, h).as_tuple() == pytest.approx(clipped.as_tuple(), abs=1e-3)


def test_label_parse_errors():
    with pytest.raises(ValueError):
        Label.from_line("3 0.5 0.5 0.1 0.1")
    with pytest.raises(ValueError):
        Label.from_line("0 0.5 0.5 0.1")
    with pytest.raises(ValueError):
        Label(ObjectClass.WIND_TURBINE, 0.5, 0.5, 0.0, 0.1)


def test_detection_records():
    d = Detection(None, "T0_0_0", ObjectClass.PLATFORM_CLUSTER, 0.75, PixelBBox(1, 2, 3, 4))
    rec = d.to_record()
    assert rec == {"chip_id": "T0_0_0", "class_id": 1, "conf": 0.75, "bbox_px": [1, 2, 3, 4]}
    assert Detection.from_record(rec) == d
    with pytest.raises(ValueError):
        Detection.from_record({"chip_id": "x", "class_id": 1})
    with pytest.raises(ValueError):
        Detection(None, "x", ObjectClass.WIND_TURBINE, 1.5, PixelBBox(0, 0, 1, 1))


def test_config_defaults_and_validation(tmp_path):
    cfg = PipelineConfig()
    assert cfg.chip_stride == 512
    assert cfg.coast_buffer_px == 100
    assert math.isclose(cfg.dedup_iou, 0.2) and math.isclose(cfg.eval_iou, 0.3)
    with pytest.raises(ValueError):
        PipelineConfig(chip_overlap=1.0)
    with pytest.raises(ValueError):
        PipelineConfig(grid_step_m=200_000.0)
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"chip_sise": 512})
    path = tmp_path / "cfg.json"
    path.write_text('{"pipeline": {"chip_size": 320}}')
    loaded = PipelineConfig.from_json(path)
    assert loaded.chip_size == 320 and loaded.chip_stride == 256
    assert PipelineConfig.from_dict(loaded.to_dict()) == loaded
