"""Binary checkpoint format ("FRRNCKPT", version 1).

Layout, all integers little-endian:

    magic   8 bytes  b"FRRNCKPT"
    version u32      1
    nparams u32
    nparams x parameter record:
        name_len u32, name utf-8
        shape    4 x u32 (actual dims, unused trailing entries 0)
        dtype    u8 (4 = float32, 8 = float64)
        value    raw little-endian
    nparams x ADAM record (same order):
        step u64, m raw, v raw (shape/dtype of the parameter)
    nstats  u32
    nstats x batch-norm record:
        name_len u32, name utf-8, channels u32, dtype u8, mean raw, var raw
    meta_len u32, meta JSON utf-8 (sorted keys)

Writing is deterministic, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import BatchNormStats
from .layers import ParamStore

MAGIC = b"FRRNCKPT"
VERSION = 1
_DTYPE_CODE = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_CODE_DTYPE = {v: k for k, v in _DTYPE_CODE.items()}


def _write_name(f, name):
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_name(f):
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode("utf-8")


def _write_array(f, a):
    f.write(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())


def _read_array(f, shape, dtype):
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(count * dtype.itemsize),
                         dtype=dtype.newbyteorder("<"))
    return data.astype(dtype).reshape(shape)


def save_checkpoint(path, store, meta=None):
    params = store.parameters()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(params)))
        for p in params:
            _write_name(f, p.name)
            dims = list(p.value.shape) + [0] * (4 - p.value.ndim)
            f.write(struct.pack("<4I", *dims))
            f.write(struct.pack("<B", _DTYPE_CODE[p.value.dtype]))
            _write_array(f, p.value)
        for p in params:
            f.write(struct.pack("<Q", p.step))
            _write_array(f, p.m)
            _write_array(f, p.v)
        f.write(struct.pack("<I", len(store.bn_stats)))
        for name, st in store.bn_stats.items():
            _write_name(f, name)
            f.write(struct.pack("<IB", st.mean.shape[0],
                                _DTYPE_CODE[st.mean.dtype]))
            _write_array(f, st.mean)
            _write_array(f, st.var)
        blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_checkpoint(path):
    """Returns (ParamStore, meta dict)."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError(f"{path}: not a FRRNCKPT file")
        version, nparams = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        records = []
        for _ in range(nparams):
            name = _read_name(f)
            dims = struct.unpack("<4I", f.read(16))
            shape = tuple(d for d in dims if d > 0)
            (code,) = struct.unpack("<B", f.read(1))
            dtype = _CODE_DTYPE[code]
            records.append((name, _read_array(f, shape, dtype)))
        store = ParamStore(records[0][1].dtype if records else np.float32)
        for name, value in records:
            store.add(name, value)
        for name, _ in records:
            p = store.param(name)
            (p.step,) = struct.unpack("<Q", f.read(8))
            p.m = _read_array(f, p.value.shape, p.value.dtype)
            p.v = _read_array(f, p.value.shape, p.value.dtype)
        (nstats,) = struct.unpack("<I", f.read(4))
        for _ in range(nstats):
            name = _read_name(f)
            channels, code = struct.unpack("<IB", f.read(5))
            dtype = _CODE_DTYPE[code]
            mean = _read_array(f, (channels,), dtype)
            var = _read_array(f, (channels,), dtype)
            store.bn_stats[name] = BatchNormStats(mean, var)
        (mlen,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(mlen).decode("utf-8"))
    return store, meta
