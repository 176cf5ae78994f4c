"""Binary checkpoint files: magic 'SWCK', version, JSON meta, tensor table.

Layout (all integers little-endian):

    4s   magic "SWCK"
    u32  format version (currently 1)
    u32  meta length, then that many bytes of UTF-8 JSON
    u32  tensor count, then per tensor:
         u16 name length + name bytes
         u8  dtype code (0=float32, 1=float64, 2=int64)
         u8  ndim, then ndim * u32 dims
         raw row-major little-endian payload

The meta JSON carries the model construction config, protocol position,
optimizer scalars, and seeds, so a load rebuilds a forward-identical model.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import StagewiseError
from .layers import Model, ResNetConfig, build_resnet

MAGIC = b"SWCK"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(StagewiseError):
    """Unreadable or malformed checkpoint file."""


@dataclass
class Checkpoint:
    version: int
    meta: dict
    tensors: dict[str, np.ndarray]

    def build_model(self) -> Model:
        """Reconstruct the model and load its parameter/buffer table."""
        config = ResNetConfig.from_dict(self.meta["model_config"])
        model = build_resnet(config)
        state = {k: v for k, v in self.tensors.items()
                 if k.startswith(("param.", "buffer."))}
        model.load_state_arrays(state)
        return model

    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("optim.")}


def save_checkpoint(path: str | Path, model: Model, meta: dict,
                    optim_arrays: dict[str, np.ndarray] | None = None) -> None:
    meta = dict(meta)
    meta["model_config"] = model.config.to_dict()
    tensors = dict(model.state_arrays())
    if optim_arrays:
        tensors.update(optim_arrays)

    chunks = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _CODES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        name_bytes = name.encode()
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint meta: {exc}") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}I")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return Checkpoint(version=version, meta=meta, tensors=tensors)
