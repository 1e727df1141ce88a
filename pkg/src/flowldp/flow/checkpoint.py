"""Binary checkpoint format for flow models.

Layout (all integers little-endian):

    magic        4 bytes  b"FDP1"
    version      u16      currently 1
    payload_len  u32
    payload:
        H, W, C            u32 each
        levels, depth      u32 each
        trained_on         u16 length + UTF-8 bytes
        n_layers           u32
        per layer:
            kind           u16 length + ASCII bytes
            level          u32
            n_arrays       u32
            per array:
                name       u16 length + ASCII bytes
                ndim       u32
                dims       u32 each
                data       float64 little-endian, row-major
    checksum     u32      CRC-32 of the payload

Loading validates the magic, version, checksum, and that the reconstructed
layer stack is shape-consistent with the declared input shape.  Fixed
(non-trainable) arrays such as permutation indices are stored alongside the
trainable ones, prefixed with "fixed:" in the array name, so a checkpoint
fully determines the model.
"""

import struct
import zlib

import numpy as np

from ..errors import FormatError
from .layers import ActNorm, Coupling, FixedPermutation, Invertible1x1, Split, Squeeze
from .model import FlowModel

MAGIC = b"FDP1"
VERSION = 1


def _pack_str(text, encoding="utf-8"):
    raw = text.encode(encoding)
    return struct.pack("<H", len(raw)) + raw


def _pack_array(name, arr):
    arr = np.asarray(arr, dtype="<f8")
    parts = [_pack_str(name, "ascii"), struct.pack("<I", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
    parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def serialize_model(model):
    """Serialize a model to checkpoint bytes."""
    payload = [struct.pack("<3I", *model.input_shape)]
    payload.append(struct.pack("<2I", model.levels, model.depth))
    payload.append(_pack_str(model.trained_on))
    payload.append(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        arrays = list(layer.params.items()) + [("fixed:" + k, v) for k, v in layer.fixed.items()]
        payload.append(_pack_str(layer.kind, "ascii"))
        payload.append(struct.pack("<2I", layer.level, len(arrays)))
        for name, arr in arrays:
            payload.append(_pack_array(name, arr))
    body = b"".join(payload)
    head = MAGIC + struct.pack("<H", VERSION) + struct.pack("<I", len(body))
    return head + body + struct.pack("<I", zlib.crc32(body))


def save_model(model, path):
    data = serialize_model(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, count, what):
        if self.pos + count > len(self.buf):
            raise FormatError(f"truncated checkpoint: reading {what} at byte {self.pos}", offset=self.pos)
        out = self.buf[self.pos : self.pos + count]
        self.pos += count
        return out

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what, encoding="utf-8"):
        n = self.u16(what + " length")
        return self.take(n, what).decode(encoding)

    def array(self):
        name = self.string("array name", "ascii")
        ndim = self.u32("array ndim")
        dims = tuple(self.u32("array dim") for _ in range(ndim))
        count = int(np.prod(dims)) if ndim else 1
        raw = self.take(8 * count, f"array {name!r} data")
        return name, np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)


def _rebuild_layer(kind, level, arrays):
    fixed = {k[len("fixed:") :]: v for k, v in arrays.items() if k.startswith("fixed:")}
    params = {k: v for k, v in arrays.items() if not k.startswith("fixed:")}
    if kind == "actnorm":
        layer = ActNorm(params["log_scale"].shape[0], level)
    elif kind == "fixed-permutation":
        layer = FixedPermutation(fixed["perm"].astype(np.int64), level)
    elif kind == "invertible-1x1-conv":
        layer = Invertible1x1(params["log_diag"].shape[0], rng=None, level=level)
    elif kind in ("affine-coupling", "additive-coupling"):
        affine = kind == "affine-coupling"
        w1, w2 = params["w1"], params["w2"]
        c_cond, hidden = w1.shape[2], w1.shape[3]
        c_trans = w2.shape[1] // 2 if affine else w2.shape[1]
        layer = Coupling(c_cond + c_trans, hidden, affine, np.random.default_rng(0), level)
    elif kind == "squeeze":
        layer = Squeeze(level)
    elif kind == "split":
        layer = Split(level)
    else:
        raise FormatError(f"unknown layer kind {kind!r} in checkpoint")
    expected = {k: v.shape for k, v in layer.params.items()}
    got = {k: v.shape for k, v in params.items()}
    if expected != got:
        raise FormatError(f"layer {kind!r} parameter shapes {got} do not match expected {expected}")
    layer.params = params
    if set(layer.fixed) != set(fixed):
        raise FormatError(f"layer {kind!r} fixed arrays {sorted(fixed)} do not match expected")
    layer.fixed = fixed
    if kind == "fixed-permutation":
        layer._refresh()
    return layer


def deserialize_model(data):
    """Parse checkpoint bytes back into a FlowModel."""
    if data[:4] != MAGIC:
        raise FormatError("bad checkpoint magic (expected FDP1)", offset=0)
    reader = _Reader(data)
    reader.pos = 4
    version = reader.u16("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    payload_len = reader.u32("payload length")
    body_start = reader.pos
    if body_start + payload_len + 4 > len(data):
        raise FormatError("truncated checkpoint payload", offset=len(data))
    body = data[body_start : body_start + payload_len]
    stored = struct.unpack("<I", data[body_start + payload_len : body_start + payload_len + 4])[0]
    actual = zlib.crc32(body)
    if stored != actual:
        raise FormatError(f"checkpoint checksum mismatch: stored {stored:#x}, computed {actual:#x}")
    reader = _Reader(body)
    shape = tuple(reader.u32("shape") for _ in range(3))
    levels = reader.u32("levels")
    depth = reader.u32("depth")
    trained_on = reader.string("trained_on")
    n_layers = reader.u32("layer count")
    layers = []
    for _ in range(n_layers):
        kind = reader.string("layer kind", "ascii")
        level = reader.u32("layer level")
        n_arrays = reader.u32("array count")
        arrays = dict(reader.array() for _ in range(n_arrays))
        layers.append(_rebuild_layer(kind, level, arrays))
    if reader.pos != len(body):
        raise FormatError(f"{len(body) - reader.pos} trailing bytes in checkpoint payload", offset=reader.pos)
    try:
        return FlowModel(shape, levels, depth, layers, trained_on)
    except Exception as exc:
        raise FormatError(f"checkpoint layers inconsistent with shape {shape}: {exc}") from exc


def load_model(path):
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
