"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic    8 bytes   b"CGMCKPT\\0"
    version  uint32    FORMAT_VERSION
    hlen     uint64    byte length of the header
    header   hlen      UTF-8 JSON: {"config", "schemas", "tensors": [{"name", "shape"}]}
    payload            float64 little-endian values of each tensor, in header order

The header is written with sorted keys and no timestamps, so identical
parameters always produce identical bytes.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .codecs import FeatureSchema
from .model import ModelParams, TrainConfig

MAGIC = b"CGMCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def schema_diff(expected, found):
    """Human-readable column-name difference, or '' when the lists match."""
    expected, found = list(expected), list(found)
    if expected == found:
        return ""
    missing = [n for n in expected if n not in found]
    extra = [n for n in found if n not in expected]
    parts = []
    if missing:
        parts.append(f"missing columns {missing}")
    if extra:
        parts.append(f"unexpected columns {extra}")
    if not parts:
        parts.append(f"column order differs: expected {expected}, found {found}")
    return "; ".join(parts)


def to_bytes(params):
    named = params.named_parameters()
    header = {
        "config": params.config.to_json(),
        "schemas": [s.to_json() for s in params.schemas],
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in named],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)), hbytes]
    chunks += [np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in named]
    return b"".join(chunks)


def save_checkpoint(params, path):
    blob = to_bytes(params)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def from_bytes(blob, expect_columns=None):
    if len(blob) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated: missing header prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, "
                              f"expected {FORMAT_VERSION}")
    body = _PREFIX.size
    if len(blob) < body + hlen:
        raise CheckpointError("checkpoint truncated inside the header")
    try:
        header = json.loads(blob[body:body + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    specs = header["tensors"]
    need = sum(int(np.prod(s["shape"], dtype=np.int64)) for s in specs) * 8
    offset = body + hlen
    if len(blob) != offset + need:
        raise CheckpointError(f"checkpoint payload has {len(blob) - offset} bytes, "
                              f"expected {need} (truncated or corrupt)")
    schemas = [FeatureSchema.from_json(s) for s in header["schemas"]]
    if expect_columns is not None:
        diff = schema_diff(expect_columns, [s.name for s in schemas])
        if diff:
            raise CheckpointError(f"checkpoint schema does not match data: {diff}")
    params = ModelParams.init(schemas, TrainConfig(**header["config"]))
    named = dict(params.named_parameters())
    if sorted(named) != sorted(s["name"] for s in specs):
        raise CheckpointError("checkpoint tensor names do not match the model layout")
    for s in specs:
        t = named[s["name"]]
        shape = tuple(s["shape"])
        if shape != t.shape:
            raise CheckpointError(f"tensor {s['name']!r} has shape {shape}, model expects "
                                  f"{t.shape}")
        n = int(np.prod(shape, dtype=np.int64))
        t.data = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(
            np.float64).reshape(shape)
        offset += n * 8
    return params


def load_checkpoint(path, expect_columns=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    return from_bytes(blob, expect_columns)
