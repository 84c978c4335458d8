"""
Binary checkpoint format.

Layout (all integers and floats little-endian)::

    b"DSEB"                      magic
    u16  version                 (1)
    u8   precision               (4 = float32, 8 = float64)
    u32  meta length, then UTF-8 JSON {"energy": ..., "inference": ...}
    u32  entry count, then entries  (parameters in canonical order)
    entry mean_image
    u8   has_adam; if 1: u64 step, then one "adam.m.<name>" and one
         "adam.v.<name>" entry per parameter

    entry := u16 name length, UTF-8 name, u8 ndim, u32 dims..., raw floats
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .energy_net import EnergyNetConfig, EnergyNetParams, param_shapes
from .inference import InferenceConfig
from .training import AdamState

MAGIC = b"DSEB"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: EnergyNetConfig
    params: EnergyNetParams
    mean_image: np.ndarray
    inference: InferenceConfig
    adam: Optional[AdamState] = None

    @property
    def precision(self) -> int:
        return self.params.dtype.itemsize

    def equals(self, other: "Checkpoint") -> bool:
        same_adam = (self.adam is None and other.adam is None) or (
            self.adam is not None and other.adam is not None and self.adam.equals(other.adam)
        )
        return (
            self.config == other.config
            and self.inference == other.inference
            and self.params.equals(other.params)
            and self.mean_image.dtype == other.mean_image.dtype
            and np.array_equal(self.mean_image, other.mean_image)
            and same_adam
        )


def _entry(name: str, arr: np.ndarray, dtype: np.dtype) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    prec = ckpt.precision
    dtype = _DTYPES[prec]
    meta = json.dumps(
        {"energy": ckpt.config.to_dict(), "inference": ckpt.inference.to_dict()},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<HB", VERSION, prec), struct.pack("<I", len(meta)), meta]
    arrays = ckpt.params.arrays()
    parts.append(struct.pack("<I", len(arrays)))
    parts.extend(_entry(k, a, dtype) for k, a in arrays.items())
    parts.append(_entry("mean_image", ckpt.mean_image, dtype))
    if ckpt.adam is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<BQ", 1, ckpt.adam.t))
        parts.extend(_entry(f"adam.m.{k}", ckpt.adam.m[k], dtype) for k in arrays)
        parts.extend(_entry(f"adam.v.{k}", ckpt.adam.v[k], dtype) for k in arrays)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: expected at least {end} bytes, file has {len(self.buf)}")
        out = self.buf[self.pos : end]
        self.pos = end
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def entry(self, dtype: np.dtype) -> tuple[str, np.ndarray]:
        (nlen,) = self.unpack("<H")
        name = self.take(nlen).decode("utf-8")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        return name, data


def decode_checkpoint(buf: bytes, dtype=None) -> Checkpoint:
    """Parse checkpoint bytes; ``dtype`` optionally converts (e.g. widens f32 to f64)."""
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    version, prec = r.unpack("<HB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if prec not in _DTYPES:
        raise CheckpointError(f"bad precision flag {prec}")
    file_dtype = _DTYPES[prec]
    out_dtype = np.dtype(dtype).newbyteorder("=") if dtype is not None else np.dtype(file_dtype.type)

    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode("utf-8"))
    config = EnergyNetConfig.from_dict(meta["energy"])
    inference = InferenceConfig(**meta["inference"])

    def read(expect_name):
        name, arr = r.entry(file_dtype)
        if name != expect_name:
            raise CheckpointError(f"expected entry {expect_name!r}, found {name!r}")
        return arr.astype(out_dtype)

    (count,) = r.unpack("<I")
    names = list(param_shapes(config))
    if count != len(names):
        raise CheckpointError(f"checkpoint has {count} parameter entries, config needs {len(names)}")
    arrays = {name: read(name) for name in names}
    mean_img = read("mean_image")
    (has_adam,) = r.unpack("<B")
    adam = None
    if has_adam:
        (t,) = r.unpack("<Q")
        m = {k: read(f"adam.m.{k}") for k in names}
        v = {k: read(f"adam.v.{k}") for k in names}
        adam = AdamState(m=m, v=v, t=t)
    if r.pos != len(buf):
        raise CheckpointError(f"checkpoint has {len(buf) - r.pos} trailing bytes")
    params = EnergyNetParams.from_arrays(config, arrays)
    return Checkpoint(config=config, params=params, mean_image=mean_img, inference=inference, adam=adam)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path, dtype=None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), dtype)
