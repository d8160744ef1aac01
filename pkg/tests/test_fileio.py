import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from offshore_sar.core import RasterF
from offshore_sar.fileio import (decode_pgm, encode_pgm, read_jsonl, read_raster_f, write_jsonl, write_raster_f)


@given(arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20))))
def test_pgm_roundtrip(raster):
    assert np.array_equal(decode_pgm(encode_pgm(raster)), raster)


def test_pgm_header_comments():
    data = b"P5\n# made by hand\n3 2\n255\n" + bytes(range(6))
    assert decode_pgm(data).tolist() == [[0, 1, 2], [3, 4, 5]]


@pytest.mark.parametrize("data", [b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00"])
def test_pgm_rejects_bad_input(data):
    with pytest.raises(ValueError):
        decode_pgm(data)


def test_raster_f_roundtrip(tmp_path):
    r = RasterF(np.array([[-20.0, -9999.0]]), nodata=-9999.0)
    write_raster_f(tmp_path / "r.npz", r)
    back = read_raster_f(tmp_path / "r.npz")
    assert back.nodata == -9999.0
    assert np.array_equal(back.values, r.values)


def test_jsonl(tmp_path):
    path = tmp_path / "d.jsonl"
    write_jsonl(path, [{"a": 1}, {"b": [1, 2]}])
    assert list(read_jsonl(path)) == [{"a": 1}, {"b": [1, 2]}]
    path.write_text('{"a": 1}\nnot json\n')
    with pytest.raises(ValueError, match=":2"):
        list(read_jsonl(path))
