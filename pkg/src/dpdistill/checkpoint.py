"""Versioned binary checkpoints for model parameters.

Layout: magic bytes, format version, JSON-serialized ModelConfig, then each
named array as (name length, name, ndim, shape, little-endian float64 data).
Round-trips are bit-exact; the sha256 of the serialized bytes serves as the
checkpoint fingerprint quoted in reports.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ParameterSet

MAGIC = b"DPDCKPT\x00"
FORMAT_VERSION = 1


def serialize_params(params: ParameterSet) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    config_blob = json.dumps(params.config.to_json(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    buf.write(struct.pack("<I", len(params.arrays)))
    for name, array in params.arrays.items():
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<I", array.ndim))
        for dim in array.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return buf.getvalue()


def deserialize_params(blob: bytes) -> ParameterSet:
    buf = io.BytesIO(blob)

    def read(n: int) -> bytes:
        data = buf.read(n)
        if len(data) != n:
            raise ValueError("truncated checkpoint")
        return data

    if read(len(MAGIC)) != MAGIC:
        raise ValueError("not a model checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<I", read(4))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (config_len,) = struct.unpack("<I", read(4))
    config = ModelConfig.from_json(json.loads(read(config_len).decode("utf-8")))
    (n_arrays,) = struct.unpack("<I", read(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<I", read(4))
        name = read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", read(4))
        shape = tuple(struct.unpack("<I", read(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(read(count * 8), dtype="<f8").reshape(shape)
        arrays[name] = data.astype(np.float64).copy()
    if buf.read(1):
        raise ValueError("trailing bytes after checkpoint payload")
    return ParameterSet(config=config, arrays=arrays)


def save_params(path: str | Path, params: ParameterSet) -> str:
    """Write a checkpoint; returns its sha256 fingerprint."""
    blob = serialize_params(params)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_params(path: str | Path) -> ParameterSet:
    return deserialize_params(Path(path).read_bytes())


def fingerprint_params(params: ParameterSet) -> str:
    return hashlib.sha256(serialize_params(params)).hexdigest()
