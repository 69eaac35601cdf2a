"""Checkpoint archive.

A checkpoint is a zip archive with three members:

``manifest.json``
    model config, epoch, best metric and any extra metadata.
``params.bin``
    parameter and buffer arrays (see :func:`write_arrays`).
``rng_state.bin``
    opaque random-generator state.

An optional ``optimizer.bin`` member uses the same array layout.

Array layout, all integers little-endian::

    magic   b"FBARR\\x00"  (6 bytes)
    version u16            (= 1)
    count   u32
    then per array:
      name_len u16, name (utf-8)
      dtype    u8   (index into DTYPES)
      ndim     u8
      shape    ndim x u64
      nbytes   u64
      data     nbytes raw bytes, C order, little-endian
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
import zipfile
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch

from fbchain.network import ModelConfig, SegmentationNet, build_model

MAGIC = b"FBARR\x00"
VERSION = 1
DTYPES = ("<f4", "<f8", "<i8", "<i4", "|u1", "|b1", "<f2")


class CheckpointError(ValueError):
    pass


def write_arrays(arrays: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        code = DTYPES.index(np.dtype(dt).str)
        arr = arr.astype(np.dtype(DTYPES[code]), copy=False)
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = arr.tobytes(order="C")
        buf.write(struct.pack("<Q", len(data)))
        buf.write(data)
    return buf.getvalue()


def read_arrays(blob: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:6]) != MAGIC:
        raise CheckpointError("bad array-block magic")
    version, count = struct.unpack_from("<HI", view, 6)
    if version != VERSION:
        raise CheckpointError(f"unsupported array-block version {version}")
    pos = 12
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BB", view, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", view, pos)
        pos += 8
        if code >= len(DTYPES):
            raise CheckpointError(f"array {name!r}: unknown dtype code {code}")
        dtype = np.dtype(DTYPES[code])
        if pos + nbytes > len(view):
            raise CheckpointError(f"array {name!r}: truncated ({len(view) - pos} of {nbytes} bytes present)")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"array {name!r}: byte count {nbytes} does not match shape {shape}")
        out[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
    return out


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: ModelConfig
    epoch: int = 0
    rng_state: bytes = b""
    best_metric: float = float("-inf")
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SegmentationNet, **kw) -> "Checkpoint":
        params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(params=params, config=model.config, **kw)

    def build(self) -> SegmentationNet:
        dtype = torch.float64 if any(a.dtype == np.float64 for a in self.params.values()) else torch.float32
        model = build_model(self.config, dtype=dtype)
        load_params(model, self.params)
        return model


def load_params(model: torch.nn.Module, params: Dict[str, np.ndarray]) -> None:
    """Load arrays into ``model``; mismatches name the top-level module involved."""
    own = model.state_dict()
    missing = sorted(set(own) - set(params))
    unexpected = sorted(set(params) - set(own))
    if missing or unexpected:
        modules = sorted({k.split(".")[0] for k in missing + unexpected})
        raise CheckpointError(
            f"checkpoint does not match the model in module(s) {', '.join(modules)}: "
            f"{len(missing)} missing, {len(unexpected)} unexpected "
            f"(e.g. {(missing + unexpected)[0]})"
        )
    for k, v in params.items():
        if tuple(own[k].shape) != v.shape:
            raise CheckpointError(
                f"parameter-shape mismatch in module {k.split('.')[0]}: {k} is "
                f"{tuple(own[k].shape)} in the model, {v.shape} in the checkpoint"
            )
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically (temp file in the same directory, then rename)."""
    path = os.fspath(path)
    manifest = {
        "format": "fbchain-checkpoint",
        "version": VERSION,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
        "extra": ckpt.extra,
    }
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
            zf.writestr("params.bin", write_arrays(ckpt.params))
            zf.writestr("rng_state.bin", ckpt.rng_state)
            if ckpt.optimizer:
                zf.writestr("optimizer.bin", write_arrays(ckpt.optimizer))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            for member in ("manifest.json", "params.bin", "rng_state.bin"):
                if member not in names:
                    raise CheckpointError(f"{path}: missing archive member {member}")
            manifest = json.loads(zf.read("manifest.json"))
            params = read_arrays(zf.read("params.bin"))
            rng = zf.read("rng_state.bin")
            optim = read_arrays(zf.read("optimizer.bin")) if "optimizer.bin" in names else {}
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    return Checkpoint(
        params=params,
        config=ModelConfig.from_dict(manifest["config"]),
        epoch=int(manifest["epoch"]),
        rng_state=rng,
        best_metric=float(manifest["best_metric"]),
        optimizer=optim,
        extra=manifest.get("extra", {}),
    )
