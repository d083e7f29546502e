"""Binary model files.

Layout (all little-endian)::

    b"TNN1"                      magic
    u32  layer count
    u64  total file size in bytes (truncation check)
    u32  in_h, in_w, in_slices, width, num_classes
    u8   mode, u8 ternarize_input, u8 len + utf-8 network name
    per layer:
      u8 kind, u8 precision (0 none, 1 float32, 2 ternary, 3 binary)
      i32 x 13: kh, kw, stride, dilation, padding, in_ch, out_ch,
                out_h, out_w, flops_h, flops_w, flops_kh, flops_kw (0 = unset)
      u8 len + name, u8 len + skip source (empty = none)
      payload:
        float32 weights    f32[Cout*Cin*kh*kw] (+ f32[Cout] bias on the prediction layer)
        ternary            u64 value words, u64 sign words (Cout rows, padded), f32[Cout] alphas
        binary             u64 sign words only (every valid lane is nonzero), f32[Cout] alphas
        batchnorm          f64 eps, f32[C] gain, shift, mean, var
    u32  CRC-32 of everything above
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import BadMagicError, ChecksumError, IntegrityError, ModelFormatError, TruncatedFileError
from ..packed import PackedTernaryTensor, validate, words_for
from .model import BNParams, Model
from .spec import LAYER_KINDS, MODES, LayerSpec, NetworkSpec

MAGIC = b"TNN1"
_PRECISION_CODES = {None: 0, "float32": 1, "ternary": 2, "binary": 3}
_PRECISION_NAMES = {v: k for k, v in _PRECISION_CODES.items()}
_GEOM = struct.Struct("<13i")
_HEADER = struct.Struct("<4sIQ5I")


def _full_plane(rows: int, words: int, n: int) -> np.ndarray:
    """Value plane with every one of the ``n`` valid lanes set."""
    plane = np.full((rows, words), np.iinfo(np.uint64).max, dtype=np.uint64)
    if n % 64:
        plane[:, -1] = np.uint64((1 << (n % 64)) - 1)
    return plane


def _short_str(s: str) -> bytes:
    raw = s.encode()
    if len(raw) > 255:
        raise ValueError(f"name too long: {s!r}")
    return bytes([len(raw)]) + raw


def _geometry(layer: LayerSpec) -> bytes:
    out_h, out_w = layer.out_size or (0, 0)
    fl_h, fl_w = layer.flops_size or (0, 0)
    fk_h, fk_w = layer.flops_kernel or (0, 0)
    return _GEOM.pack(*layer.kernel, layer.stride, layer.dilation, layer.padding,
                      layer.in_channels, layer.out_channels, out_h, out_w, fl_h, fl_w, fk_h, fk_w)


def to_bytes(model: Model) -> bytes:
    spec = model.spec
    body = io.BytesIO()
    body.write(bytes([MODES.index(spec.mode), int(spec.ternarize_input)]))
    body.write(_short_str(spec.name))
    for layer in spec.layers:
        prec = model.precision.get(layer.name) if layer.has_weights else None
        body.write(bytes([LAYER_KINDS.index(layer.kind), _PRECISION_CODES[prec]]))
        body.write(_geometry(layer))
        body.write(_short_str(layer.name))
        body.write(_short_str(layer.skip or ""))
        if layer.has_weights:
            w = model.weights[layer.name]
            if prec == "float32":
                body.write(np.asarray(w, dtype="<f4").tobytes())
            else:
                if prec == "binary":
                    if not np.array_equal(w.value_words, _full_plane(*w.value_words.shape, w.row_length)):
                        raise ValueError(f"{layer.name}: binary weights contain zeros")
                else:
                    body.write(w.value_words.astype("<u8").tobytes())
                body.write(w.sign_words.astype("<u8").tobytes())
                body.write(np.asarray(w.scales, dtype="<f4").tobytes())
            if layer.kind == "prediction":
                body.write(np.asarray(model.bias[layer.name], dtype="<f4").tobytes())
        elif layer.kind == "batchnorm":
            bn = model.bn[layer.name]
            body.write(struct.pack("<d", bn.eps))
            for arr in (bn.gain, bn.shift, bn.mean, bn.var):
                body.write(np.asarray(arr, dtype="<f4").tobytes())
    payload = body.getvalue()
    h, w = spec.input_size
    total = _HEADER.size + len(payload) + 4
    head = _HEADER.pack(MAGIC, len(spec.layers), total, h, w, spec.in_slices, spec.width,
                        spec.num_classes)
    data = head + payload
    return data + struct.pack("<I", zlib.crc32(data))


class _Reader:
    def __init__(self, data: bytes, pos: int):
        self.data, self.pos = data, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("record runs past the end of the payload")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def u8(self) -> int:
        return self.take(1)[0]

    def text(self) -> str:
        return self.take(self.u8()).decode()

    def array(self, dtype: str, count: int) -> np.ndarray:
        return np.frombuffer(self.take(np.dtype(dtype).itemsize * count), dtype=dtype)


def from_bytes(data: bytes) -> Model:
    if data[:4] != MAGIC:
        if len(data) < 4 and MAGIC.startswith(data):
            raise TruncatedFileError(f"file holds only {len(data)} bytes")
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    head_size = _HEADER.size
    if len(data) < head_size + 4:
        raise TruncatedFileError(f"file holds only {len(data)} bytes")
    _, n_layers, total, in_h, in_w, slices, width, classes = _HEADER.unpack(data[:head_size])
    if len(data) < total:
        raise TruncatedFileError(f"file holds {len(data)} of {total} bytes")
    if len(data) > total:
        raise ChecksumError(f"size field says {total} bytes, file holds {len(data)}")
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored:
        raise ChecksumError("CRC-32 mismatch")

    r = _Reader(data[:-4], head_size)
    try:
        mode_idx, tern_in = r.u8(), r.u8()
        net_name = r.text()
        layers, weights, precision, bn, bias = [], {}, {}, {}, {}
        for _ in range(n_layers):
            kind, prec = LAYER_KINDS[r.u8()], _PRECISION_NAMES[r.u8()]
            g = r.unpack(_GEOM)
            name, skip = r.text(), r.text() or None
            layer = LayerSpec(
                kind, name, kernel=(g[0], g[1]), stride=g[2], dilation=g[3], padding=g[4],
                in_channels=g[5], out_channels=g[6],
                out_size=(g[7], g[8]) if g[7] else None,
                skip=skip,
                flops_size=(g[9], g[10]) if g[9] else None,
                flops_kernel=(g[11], g[12]) if g[11] else None,
            )
            layers.append(layer)
            if layer.has_weights:
                precision[name] = prec
                cout = layer.out_channels
                n = layer.param_count // cout
                if prec == "float32":
                    weights[name] = r.array("<f4", layer.param_count).reshape(layer.weight_shape).astype(np.float32)
                elif prec in ("ternary", "binary"):
                    nw = cout * words_for(n)
                    if prec == "ternary":
                        value = r.array("<u8", nw).reshape(cout, -1)
                    else:
                        value = _full_plane(cout, words_for(n), n)
                    sign = r.array("<u8", nw).reshape(cout, -1)
                    scales = r.array("<f4", cout)
                    packed = PackedTernaryTensor((cout, n), sign, value, scales)
                    problem = validate(packed)
                    if problem:
                        raise IntegrityError(f"{name}: {problem}")
                    weights[name] = packed
                else:
                    raise ModelFormatError(f"{name}: weighted layer without precision")
                if kind == "prediction":
                    bias[name] = r.array("<f4", cout).astype(np.float32)
            elif kind == "batchnorm":
                (eps,) = r.unpack(struct.Struct("<d"))
                c = layer.out_channels
                arrs = [r.array("<f4", c).astype(np.float32) for _ in range(4)]
                bn[name] = BNParams(*arrs, eps=eps)
        if r.pos != len(r.data):
            raise ModelFormatError(f"{len(r.data) - r.pos} unexpected trailing bytes")
        spec = NetworkSpec(tuple(layers), input_size=(in_h, in_w), in_slices=slices, width=width,
                           mode=MODES[mode_idx], ternarize_input=bool(tern_in), name=net_name,
                           num_classes=classes)
    except (IndexError, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"malformed model record: {exc}") from exc
    return Model(spec, weights, precision, bn, bias)


def serialize(model: Model, path) -> int:
    """Write ``model`` to ``path``; returns the number of bytes written."""
    data = to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def deserialize(path) -> Model:
    return from_bytes(Path(path).read_bytes())
