"""RBNC checkpoint codec.

Layout: 4-byte magic "RBNC", u32 little-endian version, u64 little-endian
header length, UTF-8 JSON header (layer descriptors in order, tensor names,
shapes, dtype, metadata), then the raw tensor payload as little-endian
IEEE-754 single precision, row-major, in header order.
"""
import dataclasses
import json
import struct

import numpy as np

from .model import LayerSpec, ModelGraph

MAGIC = b"RBNC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path):
    tensors = []
    for name, arr in model.params.items():
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name} is {arr.dtype}, expected float32")
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
    header = {
        "layers": [dataclasses.asdict(l) for l in model.layers],
        "input_shape": list(model.input_shape),
        "boundary_map": [[b, int(n)] for b, n in model.boundary_map],
        "tensors": tensors,
        "meta": model.meta,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, arr in model.params.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16:
        raise CheckpointError("truncated checkpoint: missing preamble")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise CheckpointError("truncated checkpoint: incomplete header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed header: {e}") from None

    field_names = {f.name for f in dataclasses.fields(LayerSpec)}
    layers = []
    for d in header.get("layers", []):
        extra = set(d) - field_names
        if extra:
            raise CheckpointError(f"unknown layer fields {sorted(extra)}")
        layers.append(LayerSpec(**d))

    params = {}
    offset = 16 + hlen
    for t in header.get("tensors", []):
        if t.get("dtype") != "float32":
            raise CheckpointError(f"tensor {t.get('name')}: unsupported dtype")
        shape = tuple(int(d) for d in t["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + nbytes > len(data):
            raise CheckpointError(f"truncated payload at tensor {t['name']}")
        arr = np.frombuffer(data[offset:offset + nbytes], dtype="<f4").reshape(shape)
        params[t["name"]] = arr.astype(np.float32, copy=True)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} unexpected trailing bytes")

    return ModelGraph(
        layers=layers,
        params=params,
        boundary_map=[(b, int(n)) for b, n in header.get("boundary_map", [])],
        input_shape=tuple(header.get("input_shape", [])),
        meta=header.get("meta", {}),
    )
