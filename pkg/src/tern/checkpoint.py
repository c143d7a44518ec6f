"""Versioned binary checkpoint container.

Layout (little-endian)::

    b"TERNCKPT"                  magic
    u16                          format version (currently 1)
    u32 n, n bytes               UTF-8 JSON metadata (sorted keys): run config,
                                 vocabulary, epoch, Adam hyper-parameters/step
    u32                          entry count
    per entry:
      u16 n, n bytes             UTF-8 name
      u8 ndim, ndim x u32        shape
      prod(shape) x f32          values, row-major

Model tensors use their parameter names. Adam moments are stored as
``adam.m/<name>`` and ``adam.v/<name>``. Shared encoder layers appear once,
under ``shared.*``, because the model lists every parameter exactly once.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .numerics import AdamState

MAGIC = b"TERNCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict  # name -> float32 ndarray, insertion ordered


def encode(meta: dict, tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        bname = name.encode("utf-8")
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if data[:8] != MAGIC:
        raise ParseError("not a checkpoint (bad magic)", source)
    try:
        (version,) = struct.unpack_from("<H", data, 8)
        if version != VERSION:
            raise ParseError(f"unsupported checkpoint version {version}", source)
        off = 10
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        meta = json.loads(data[off:off + n].decode("utf-8"))
        off += n
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode("utf-8")
            off += ln
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 4 * size > len(data):
                raise ParseError(f"entry {name!r} runs past end of file", source)
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"truncated or corrupt checkpoint: {exc}", source) from None
    if off != len(data):
        raise ParseError(f"{len(data) - off} trailing bytes", source)
    return Checkpoint(meta, tensors)


def save(path, model, meta: dict, adam: AdamState | None = None) -> None:
    tensors = {name: p.data for name, p in model.named_parameters()}
    meta = dict(meta)
    if adam is not None:
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                        "eps": adam.eps, "step": adam.step}
        for name in list(tensors):
            if name in adam.m:
                tensors[f"adam.m/{name}"] = adam.m[name]
                tensors[f"adam.v/{name}"] = adam.v[name]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(meta, tensors))
    tmp.replace(path)


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    return decode(path.read_bytes(), str(path))


def restore(ckpt: Checkpoint, model, adam: AdamState | None = None) -> None:
    """Copy stored tensors into ``model`` (and ``adam``), casting to the model dtype."""
    for name, p in model.named_parameters():
        if name not in ckpt.tensors:
            raise ValidationError(f"checkpoint lacks parameter {name!r}")
        stored = ckpt.tensors[name]
        if stored.shape != p.shape:
            raise ValidationError(f"parameter {name!r}: checkpoint shape {stored.shape} != model shape {p.shape}")
        p.data[...] = stored.astype(p.dtype)
    if adam is not None and "adam" in ckpt.meta:
        a = ckpt.meta["adam"]
        adam.lr, adam.beta1, adam.beta2, adam.eps, adam.step = a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"]
        dtype = model.parameters()[0].dtype if model.parameters() else np.float32
        for name, _ in model.named_parameters():
            if f"adam.m/{name}" in ckpt.tensors:
                adam.m[name] = ckpt.tensors[f"adam.m/{name}"].astype(dtype)
                adam.v[name] = ckpt.tensors[f"adam.v/{name}"].astype(dtype)
