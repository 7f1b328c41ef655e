"""``ADVZOO01`` model container files.

Layout::

    b"ADVZOO01"                      8-byte magic
    uint32 little-endian             header length in bytes
    UTF-8 JSON header                id, family, seed, num_classes, input_shape,
                                     input_scale, layers (+ weight_shapes), top1_error
    float64 little-endian blobs      every weight tensor, in layer order
    uint64 little-endian             CRC-64/XZ of all preceding bytes
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import LayerSpec, Model

MAGIC = b"ADVZOO01"

_CRC64_POLY = 0xC96C5795D7870F42  # ECMA-182, reflected


def _crc_table():
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _crc_table()


def crc64(data, crc=0):
    """CRC-64/XZ. ``crc64(b"123456789") == 0x995DC9BBDF1939FA``."""
    table = _TABLE
    crc ^= 0xFFFFFFFFFFFFFFFF
    for byte in bytes(data):
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


class ContainerError(ValueError):
    pass


class ContainerVersionError(ContainerError):
    pass


class ContainerFormatError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


def _header(model):
    layers = []
    for spec, p in zip(model.layers, model.params):
        d = spec.to_dict()
        d["weight_shapes"] = [list(a.shape) for a in p]
        layers.append(d)
    return {
        "id": model.id,
        "family": model.family,
        "seed": model.seed,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "input_scale": model.input_scale,
        "layers": layers,
        "top1_error": model.top1_error,
        "metadata": model.metadata,
    }


def dumps_model(model):
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<I", len(header))
    body += header
    for p in model.params:
        for a in p:
            body += np.ascontiguousarray(a, dtype="<f8").tobytes()
    body += struct.pack("<Q", crc64(body))
    return bytes(body)


def loads_model(raw):
    if len(raw) < 12:
        raise ContainerFormatError("truncated container: missing header")
    if raw[:8] != MAGIC:
        raise ContainerVersionError(f"bad magic {raw[:8]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen + 8:
        raise ContainerFormatError("truncated container")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"unreadable header: {exc}") from exc
    shapes = [[tuple(s) for s in layer.get("weight_shapes", [])] for layer in header["layers"]]
    n_values = sum(int(np.prod(s)) for layer in shapes for s in layer)
    blob_len = len(raw) - 12 - hlen - 8
    if blob_len != 8 * n_values:
        raise ContainerFormatError(f"header declares {n_values} weights ({8 * n_values} bytes), "
                                   f"blob holds {blob_len} bytes")
    (stored,) = struct.unpack("<Q", raw[-8:])
    if crc64(raw[:-8]) != stored:
        raise ChecksumError("CRC-64 mismatch")
    blob = np.frombuffer(raw, dtype="<f8", count=n_values, offset=12 + hlen)
    params, offset = [], 0
    for layer in shapes:
        arrs = []
        for s in layer:
            size = int(np.prod(s))
            arrs.append(blob[offset:offset + size].reshape(s).astype(np.float64))
            offset += size
        params.append(tuple(arrs))
    layers = []
    for d in header["layers"]:
        d = dict(d)
        d.pop("weight_shapes", None)
        layers.append(LayerSpec.from_dict(d))
    try:
        return Model(header["id"], header["family"], tuple(header["input_shape"]), layers, params,
                     header["num_classes"], seed=header["seed"], top1_error=header["top1_error"],
                     input_scale=header["input_scale"], metadata=header.get("metadata", {}))
    except ValueError as exc:
        raise ContainerFormatError(f"inconsistent container: {exc}") from exc


def save_model(model, path):
    Path(path).write_bytes(dumps_model(model))


def load_model(path):
    return loads_model(Path(path).read_bytes())
