import numpy as np
import pytest

from mirror_sat import netpbm
from mirror_sat.netpbm import NetpbmError


def test_image_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    netpbm.write_image(tmp_path / "a.ppm", img)
    back = netpbm.read_image(tmp_path / "a.ppm")
    assert np.array_equal(back, img)
    netpbm.write_image(tmp_path / "b.ppm", back)
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_mask_round_trip_and_encoding(tmp_path):
    mask = (np.random.default_rng(1).random((6, 4)) > 0.5).astype(np.uint8)
    netpbm.write_mask(tmp_path / "m.pgm", mask)
    raw = netpbm.read_gray(tmp_path / "m.pgm")
    assert set(np.unique(raw)) <= {0, 255}
    assert np.array_equal(netpbm.read_mask(tmp_path / "m.pgm"), mask)


def test_payload_length_64():
    data = netpbm.encode(np.zeros((64, 64, 3), np.uint8))
    header = b"P6\n64 64\n255\n"
    assert data.startswith(header) and len(data) - len(header) == 3 * 64 * 64


def test_comments_in_header_are_skipped():
    data = b"P5\n# made by hand\n2 1 # width height\n255\n\x00\xff"
    assert netpbm.decode(data).tolist() == [[0, 255]]


def test_bad_mask_value_reports_offset(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P5\n3 1\n255\n\x00\x80\xff")
    with pytest.raises(NetpbmError) as exc:
        netpbm.read_mask(p)
    assert exc.value.offset == len(b"P5\n3 1\n255\n") + 1
    assert "bad.pgm" in str(exc.value)


@pytest.mark.parametrize("data,offset,match", [
    (b"P3\n1 1\n255\n000", 0, "magic"),
    (b"P6\n2 2\n255\n" + b"\x00" * 11, len(b"P6\n2 2\n255\n") + 11, "truncated"),
    (b"P5\n2 1\n255\n\x00\x00\x00", len(b"P5\n2 1\n255\n") + 2, "trailing"),
    (b"P5\n2 x\n255\n\x00\x00", 5, "height"),
    (b"P5\n1 1\n65535\n\x00\x00", 7, "maxval"),
    (b"P5\n0 1\n255\n", 3, "size"),
    (b"P5", 2, "whitespace"),
])
def test_malformed_files_have_positioned_errors(data, offset, match):
    with pytest.raises(NetpbmError, match=match) as exc:
        netpbm.decode(data)
    assert exc.value.offset == offset
    assert f"byte {offset}" in str(exc.value)


def test_reader_kind_checks(tmp_path):
    netpbm.write_gray(tmp_path / "g.pgm", np.zeros((2, 2), np.uint8))
    with pytest.raises(NetpbmError):
        netpbm.read_image(tmp_path / "g.pgm")
    netpbm.write_image(tmp_path / "c.ppm", np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(NetpbmError):
        netpbm.read_mask(tmp_path / "c.ppm")


def test_float_images_are_quantized():
    assert netpbm.to_uint8(np.array([0.0, 0.5, 1.0, 1.7, -0.2])).tolist() == [0, 128, 255, 255, 0]
