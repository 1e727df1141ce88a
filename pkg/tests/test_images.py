import numpy as np
import pytest

from flowldp.errors import FormatError
from flowldp.images import (
    dequantize,
    from_pixels,
    parse_pgm,
    pgm_bytes,
    read_pgm,
    to_pixels,
    write_pgm,
)


def test_pixel_mapping_roundtrip_lossless():
    p = np.arange(256, dtype=np.uint8)
    assert np.array_equal(to_pixels(from_pixels(p)), p)


def test_pixel_mapping_range():
    v = from_pixels(np.array([0, 255]))
    assert v[0] == pytest.approx(-0.498046875)
    assert v[1] == pytest.approx(0.498046875)


def test_to_pixels_clamps_out_of_range():
    assert to_pixels(np.array([-2.0, 2.0])).tolist() == [0, 255]


def test_dequantize_stays_inside_bin():
    rng = np.random.default_rng(0)
    p = np.array([0.0, 128.0, 255.0])
    v = dequantize(p, rng)
    assert ((v >= from_pixels(p) - 0.5 / 256) & (v < from_pixels(p) + 0.5 / 256)).all()


def test_pgm_header_parses_2x2():
    buf = b"P5\n2 2\n255\n" + bytes([10, 20, 30, 40])
    img = parse_pgm(buf)
    assert img.shape == (2, 2, 1)
    assert np.array_equal(to_pixels(img[:, :, 0]), np.array([[10, 20], [30, 40]], dtype=np.uint8))


def test_pgm_comments_skipped():
    buf = b"P5\n# a comment\n2 1 # trailing\n255\n" + bytes([1, 2])
    img = parse_pgm(buf)
    assert img.shape == (1, 2, 1)


def test_pgm_write_read_bytes_identical(tmp_path):
    rng = np.random.default_rng(1)
    pixels = rng.integers(0, 256, size=(8, 8), dtype=np.uint8)
    path = tmp_path / "a.pgm"
    write_pgm(from_pixels(pixels[:, :, None]), path)
    first = path.read_bytes()
    again = tmp_path / "b.pgm"
    write_pgm(read_pgm(path), again)
    assert again.read_bytes() == first
    assert np.array_equal(to_pixels(read_pgm(path)[:, :, 0]), pixels)


@pytest.mark.parametrize(
    "buf, fragment",
    [
        (b"P6\n2 2\n255\n" + bytes(4), "magic"),
        (b"P5\n2 2\n65535\n" + bytes(8), "maxval"),
        (b"P5\n2 2\n255\n" + bytes(3), "truncated"),
        (b"P5\nx 2\n255\n" + bytes(4), "non-numeric"),
    ],
)
def test_pgm_malformed_inputs(buf, fragment):
    with pytest.raises(FormatError) as err:
        parse_pgm(buf)
    assert fragment in str(err.value)
    assert err.value.offset is not None


def test_pgm_truncation_reports_offset():
    buf = b"P5\n2 2\n255\n" + bytes(2)
    with pytest.raises(FormatError) as err:
        parse_pgm(buf)
    assert err.value.offset == len(buf)


def test_pgm_bytes_header():
    img = from_pixels(np.zeros((3, 5, 1)))
    assert pgm_bytes(img).startswith(b"P5\n5 3\n255\n")
