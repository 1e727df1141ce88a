"""Grayscale image values and binary PGM (P5) I/O.

Images live in memory as float64 arrays of shape (H, W, C) holding values in
the open unit interval centered on zero: an 8-bit pixel value p maps to
(p + 0.5) / 256 - 0.5, the midpoint of its quantization bin.  This is the
representation every flow consumes and produces.  ``write_pgm`` quantizes
back to 8-bit, so read -> write is lossless for images that came from 8-bit
data.

Training uses ``dequantize`` instead of the deterministic midpoint: uniform
sub-bin noise makes maximum likelihood on discrete pixels well posed.
"""

import numpy as np

from .errors import ConfigError, FormatError

PIXEL_LEVELS = 256
VALUE_MIN = -0.5
VALUE_MAX = 0.5


def from_pixels(pixels):
    """Map integer pixel values in [0, 255] to mid-bin values in (-0.5, 0.5)."""
    p = np.asarray(pixels, dtype=np.float64)
    return (p + 0.5) / PIXEL_LEVELS - 0.5


def to_pixels(values):
    """Quantize unit-range values back to integer pixels in [0, 255]."""
    v = np.asarray(values, dtype=np.float64)
    p = np.floor((v + 0.5) * PIXEL_LEVELS)
    return np.clip(p, 0, PIXEL_LEVELS - 1).astype(np.uint8)


def dequantize(pixels, rng):
    """Map integer pixels to continuous values with uniform sub-bin noise."""
    p = np.asarray(pixels, dtype=np.float64)
    u = rng.random(p.shape)
    return (p + u) / PIXEL_LEVELS - 0.5


def check_image(x, shape=None):
    """Validate an (H, W, C) image array; returns it as float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ConfigError(f"expected (H, W, C) image, got shape {x.shape}")
    if shape is not None and tuple(x.shape) != tuple(shape):
        raise ConfigError(f"image shape {x.shape} does not match expected {tuple(shape)}")
    if not np.isfinite(x).all():
        raise ConfigError("image contains non-finite values")
    return x


def _read_header_token(buf, pos):
    """Return the next whitespace-delimited token, skipping '#' comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"unexpected end of PGM header at byte {start}", offset=start)
    return buf[start:pos], pos


def parse_pgm(buf):
    """Parse binary PGM bytes into an (H, W, 1) mid-bin image array."""
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM: expected magic 'P5' at byte 0", offset=0)
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_header_token(buf, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise FormatError(f"non-numeric PGM header field {token!r} at byte {pos}", offset=pos) from None
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid PGM dimensions {width}x{height}", offset=pos)
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval} (only 255)", offset=pos)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"missing whitespace after PGM maxval at byte {pos}", offset=pos)
    pos += 1
    need = width * height
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise FormatError(
            f"truncated PGM payload: need {need} bytes at byte {pos}, found {len(payload)}",
            offset=pos + len(payload),
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 1)
    return from_pixels(pixels)


def read_pgm(path):
    """Read a binary PGM file into an (H, W, 1) mid-bin image array."""
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def pgm_bytes(x):
    """Serialize a unit-range (H, W, 1) image as binary PGM bytes."""
    x = check_image(x)
    if x.shape[2] != 1:
        raise ConfigError(f"PGM supports a single channel, got C={x.shape[2]}")
    h, w, _ = x.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + to_pixels(x[:, :, 0]).tobytes()


def write_pgm(x, path):
    """Quantize a unit-range image to 8 bits and write it as binary PGM."""
    data = pgm_bytes(x)
    with open(path, "wb") as fh:
        fh.write(data)
