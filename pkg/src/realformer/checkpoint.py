"""Binary checkpoints.

Layout (all integers little-endian)::

    b"RAFL" | u32 version | u32 manifest length | manifest (UTF-8 JSON)
    | float64 payloads | u32 CRC-32 of the payload region

The manifest holds the model config, step, RNG states, free-form extras and
an ordered list of arrays ``{name, shape, offset}`` (offsets in bytes from
the start of the payload region).
"""
from __future__ import annotations

import json
import math
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .model import ModelConfig, ParameterStore, parameter_shapes

MAGIC = b"RAFL"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_CRC = struct.Struct("<I")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def write_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    entries, chunks, offset = [], [], 0
    for name, a in arrays.items():
        buf = np.ascontiguousarray(a, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    manifest = _dumps({**meta, "arrays": entries})
    payload = b"".join(chunks)
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        f.write(manifest)
        f.write(payload)
        f.write(_CRC.pack(zlib.crc32(payload)))
    os.replace(tmp, path)


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedCheckpointError(f"{path}: file shorter than header")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    start = _HEADER.size + mlen
    if len(raw) < start + _CRC.size:
        raise TruncatedCheckpointError(f"{path}: manifest or checksum missing")
    try:
        meta = json.loads(raw[_HEADER.size:start])
    except ValueError as exc:
        raise TruncatedCheckpointError(f"{path}: unreadable manifest ({exc})") from None
    entries = meta.pop("arrays")
    need = sum(8 * math.prod(e["shape"]) for e in entries)
    payload = raw[start:-_CRC.size]
    if len(payload) != need:
        raise TruncatedCheckpointError(f"{path}: payload is {len(payload)} bytes, manifest needs {need}")
    (crc,) = _CRC.unpack(raw[-_CRC.size:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    arrays = {}
    for e in entries:
        n = math.prod(e["shape"])
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"])
        arrays[e["name"]] = a.astype(np.float64).reshape(e["shape"])
    return arrays, meta


def save_checkpoint(store, config: ModelConfig, step: int, path, *, rng_state=None,
                    extra_arrays: Mapping[str, np.ndarray] | None = None, extra: Mapping | None = None) -> None:
    """Write parameters (and optional optimizer arrays) with a JSON manifest."""
    arrays = {f"param/{k}": v for k, v in store.items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = v
    meta = {"config": config.to_dict(), "step": int(step), "rng_state": rng_state, "extra": dict(extra or {})}
    write_arrays(path, arrays, meta)


class Checkpoint(tuple):
    """(store, config, step) with the remaining manifest fields as attributes."""

    def __new__(cls, store, config, step, rng_state, extra_arrays, extra):
        self = super().__new__(cls, (store, config, step))
        self.rng_state = rng_state
        self.extra_arrays = extra_arrays
        self.extra = extra
        return self

    store = property(lambda self: self[0])
    config = property(lambda self: self[1])
    step = property(lambda self: self[2])


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect``, verify every shape against that config."""
    arrays, meta = read_arrays(path)
    config = ModelConfig.from_dict(meta["config"])
    store = ParameterStore()
    extra_arrays = {}
    for name, a in arrays.items():
        kind, _, key = name.partition("/")
        (store if kind == "param" else extra_arrays)[key] = a
    reference = parameter_shapes(expect if expect is not None else config)
    for key, shape in reference.items():
        if key not in store:
            raise ShapeMismatchError(f"{path}: parameter {key} missing")
        if store[key].shape != tuple(shape):
            raise ShapeMismatchError(f"{path}: parameter {key} has shape {store[key].shape}, expected {tuple(shape)}")
    for key in store:
        if key not in reference:
            raise ShapeMismatchError(f"{path}: unexpected parameter {key}")
    return Checkpoint(store, config, meta["step"], meta.get("rng_state"), extra_arrays, meta.get("extra", {}))
