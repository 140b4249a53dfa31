import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from intent_cir import pnm


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]))))
def test_u8_round_trip(tmp_path_factory, raw):
    path = tmp_path_factory.mktemp("p") / "x.pnm"
    pnm.write_pnm(path, raw / 255.0)
    assert np.array_equal(pnm.read_pnm_u8(path), raw)
    np.testing.assert_allclose(pnm.read_pnm(path), raw / 255.0, atol=0)


def test_header_layout(tmp_path):
    pnm.write_pnm(tmp_path / "a.ppm", np.zeros((2, 3, 3)))
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n3 2\n255\n")
    pnm.write_pnm(tmp_path / "a.pgm", np.ones((2, 3)))
    assert (tmp_path / "a.pgm").read_bytes() == b"P5\n3 2\n255\n" + bytes([255] * 6)


def test_quantisation_rounds_half_up():
    data = pnm.to_bytes(np.array([[[0.5 / 255.0], [1.5 / 255.0], [0.49 / 255.0]]]))
    assert list(data[-3:]) == [1, 2, 0]


def test_comments_in_header(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 1\n# another\n255\n" + bytes([7, 9]))
    assert pnm.read_pnm_u8(path)[..., 0].tolist() == [[7, 9]]


@pytest.mark.parametrize("blob", [b"P3\n1 1\n255\n0 0 0", b"P5\n1 1\n65535\n\x00\x00", b"P6\n4 4\n255\n\x00"])
def test_bad_files_rejected(tmp_path, blob):
    path = tmp_path / "bad.pnm"
    path.write_bytes(blob)
    with pytest.raises(ValueError):
        pnm.read_pnm_u8(path)


def test_pgm_u8_writer(tmp_path):
    vals = np.array([[0, 128], [255, 3]], dtype=np.uint8)
    pnm.write_pgm_u8(tmp_path / "h.pgm", vals)
    assert np.array_equal(pnm.read_pnm_u8(tmp_path / "h.pgm")[..., 0], vals)
