"""Binary model file (``.rvxr``), little-endian throughout.

Layout::

    b"RVXR"  u32 version(=1)  u8 mode (0 train-multibranch, 1 deploy-fused)
    u32 n_blocks  u32 channels[n_blocks]  u32 strides[n_blocks]
    u32 in_c  u32 in_h  u32 in_w  u32 n_classes
    u32 n_tensors
    n_tensors x { u16 name_len, utf-8 name, u8 rank, u32 dims[rank], f32 data[prod(dims)] }
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ModelFileError, TruncatedFileError, UnsupportedVersionError
from .model import DEPLOY, TRAIN, FusedConvParams, RepVggBlockParams, RepVggModel
from .tensor import BatchNormParams

MAGIC = b"RVXR"
VERSION = 1
_MODES = {TRAIN: 0, DEPLOY: 1}


def dumps(model: RepVggModel) -> bytes:
    out = bytearray(MAGIC)
    n = len(model.blocks)
    out += struct.pack("<IB", VERSION, _MODES[model.mode])
    out += struct.pack(f"<I{n}I{n}I", n, *model.channels, *model.strides)
    out += struct.pack("<4I", *model.input_shape, model.num_classes)
    tensors = model.tensors()
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack(f"<H{len(raw)}sB{arr.ndim}I", len(raw), raw, arr.ndim, *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def save_model(model: RepVggModel, path):
    """Write atomically (temp file in the target directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(dumps(model))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise TruncatedFileError(f"file ends at byte {len(self.buf)}, needed {self.pos + size}")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def floats(self, count):
        size = 4 * count
        if self.pos + size > len(self.buf):
            raise TruncatedFileError(f"tensor data truncated at byte {len(self.buf)}")
        arr = np.frombuffer(self.buf, dtype="<f4", count=count, offset=self.pos).astype(np.float32)
        self.pos += size
        return arr


def loads(buf: bytes) -> RepVggModel:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    (version,) = r.take("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"model file version {version} is not supported (expected {VERSION})")
    (mode_byte,) = r.take("<B")
    modes = {v: k for k, v in _MODES.items()}
    if mode_byte not in modes:
        raise ModelFileError(f"unknown mode byte {mode_byte}")
    (n,) = r.take("<I")
    channels = r.take(f"<{n}I")
    strides = r.take(f"<{n}I")
    in_c, in_h, in_w, n_classes = r.take("<4I")
    (count,) = r.take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.take("<H")
        (raw,) = r.take(f"<{name_len}s")
        (rank,) = r.take("<B")
        dims = r.take(f"<{rank}I")
        tensors[raw.decode("utf-8")] = r.floats(int(np.prod(dims, dtype=np.int64))).reshape(dims)
    if r.pos != len(buf):
        raise ModelFileError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    try:
        return _build(modes[mode_byte], channels, strides, (in_c, in_h, in_w), n_classes, tensors)
    except ValueError as exc:
        raise ModelFileError(f"inconsistent model file: {exc}") from exc


def _build(mode, channels, strides, input_shape, n_classes, t):
    def get(name):
        try:
            return t[name]
        except KeyError:
            raise ModelFileError(f"missing tensor {name!r}") from None

    def bn(prefix):
        return BatchNormParams(get(prefix + ".gamma"), get(prefix + ".beta"), get(prefix + ".running_mean"),
                               get(prefix + ".running_var"))

    blocks = []
    for i, s in enumerate(strides):
        p = f"blocks.{i}."
        if mode == DEPLOY:
            blocks.append(FusedConvParams(get(p + "weight"), get(p + "bias"), s))
        else:
            bn_id = bn(p + "bn_id") if p + "bn_id.gamma" in t else None
            blocks.append(RepVggBlockParams(get(p + "conv3x3_w"), bn(p + "bn3"), get(p + "conv1x1_w"), bn(p + "bn1"),
                                            bn_id, s))
    model = RepVggModel(blocks, get("head.w"), get("head.b"), mode, tuple(input_shape))
    if model.channels != tuple(channels) or model.num_classes != n_classes:
        raise ModelFileError("architecture descriptor does not match tensor shapes")
    return model


def load_model(path) -> RepVggModel:
    return loads(Path(path).read_bytes())
