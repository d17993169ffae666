"""Binary checkpoint format.

Layout (all integers little-endian):

    b"CDFLOW"                       magic
    u32 version                     currently 1
    u32 n_scales, u32 n_steps, u32 hidden_width
    f64 clamp
    u32 height, u32 width
    u32 n_params
    n_params × record:
        u16 name length, utf-8 name
        u8 ndim, ndim × u32 extents
        prod(extents) × f64 values (row-major)

Records appear in schedule order. Loading checks the parameter names,
shapes and count against the ones implied by the stored configuration.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .exceptions import InputError
from .flow import FlowConfig, FlowModel

MAGIC = b"CDFLOW"
VERSION = 1


def save_checkpoint(model: FlowModel, path: str | os.PathLike) -> None:
    cfg = model.config
    chunks = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<III", cfg.n_scales, cfg.n_steps, cfg.hidden_width),
        struct.pack("<d", cfg.clamp),
        struct.pack("<II", *cfg.input_size),
        struct.pack("<I", len(model.params)),
    ]
    for name, tensor in model.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise InputError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | os.PathLike) -> FlowModel:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise InputError(f"{path}: cannot read checkpoint ({exc})") from exc
    r = _Reader(buf, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise InputError(f"{path}: not a CDFLOW checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    n_scales, n_steps, hidden = r.unpack("<III")
    (clamp,) = r.unpack("<d")
    h, w = r.unpack("<II")
    cfg = FlowConfig(n_scales=n_scales, n_steps=n_steps, hidden_width=hidden, clamp=clamp, input_size=(h, w))
    expected = FlowModel.expected_parameter_shapes(cfg)
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise InputError(f"{path}: {count} parameters stored, configuration implies {len(expected)}")
    state = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        if name not in expected or tuple(shape) != expected[name]:
            raise InputError(f"{path}: unexpected parameter {name} with shape {shape}")
        n = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise InputError(f"{path}: trailing bytes after parameters")
    model = FlowModel(cfg, w_init="identity")
    model.load_state_dict(state)
    model.actnorm_initialized = True
    return model
