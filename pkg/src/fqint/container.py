"""Single-file tensor container.

Layout (all header lines are UTF-8, ``\\n`` terminated)::

    FQINT-CONTAINER 1
    --- metadata <line count>
    <key> = <json value>          (sorted by key)
    --- tensors <count>
    <name> <dtype> <d0,d1,...> <offset> <nbytes>   (sorted by name)
    --- payload <nbytes>
    <raw little-endian tensor bytes, concatenated>

Writing is deterministic: identical inputs produce identical bytes.
"""
from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = "FQINT-CONTAINER"
VERSION = 1

DTYPES = {
    "i8": "<i1", "u8": "<u1", "i16": "<i2", "u16": "<u2",
    "i32": "<i4", "i64": "<i8", "f32": "<f4", "f64": "<f8",
}
_TAG_OF = {(np.dtype(v).kind, np.dtype(v).itemsize): k for k, v in DTYPES.items()}


def dtype_tag(dtype) -> str:
    dt = np.dtype(dtype)
    tag = _TAG_OF.get((dt.kind, dt.itemsize))
    if tag is None:
        raise FormatError(f"unsupported dtype {dtype}")
    return tag


def dumps(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    meta_lines = []
    for key in sorted(metadata):
        if any(ch.isspace() for ch in key) or "=" in key:
            raise FormatError(f"bad metadata key {key!r}")
        meta_lines.append(f"{key} = {json.dumps(metadata[key], sort_keys=True, separators=(', ', ': '))}")
    manifest, payload, offset = [], io.BytesIO(), 0
    for name in sorted(tensors):
        if not name or any(ch.isspace() for ch in name):
            raise FormatError(f"bad tensor name {name!r}")
        arr = np.asarray(tensors[name])
        tag = dtype_tag(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        manifest.append(f"{name} {tag} {shape or '-'} {offset} {len(raw)}")
        payload.write(raw)
        offset += len(raw)
    header = [f"{MAGIC} {VERSION}", f"--- metadata {len(meta_lines)}", *meta_lines,
              f"--- tensors {len(manifest)}", *manifest, f"--- payload {offset}"]
    return ("\n".join(header) + "\n").encode() + payload.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    stream = io.BytesIO(blob)

    def line() -> str:
        raw = stream.readline()
        if not raw.endswith(b"\n"):
            raise FormatError("truncated header")
        return raw[:-1].decode()

    def section(name: str) -> int:
        parts = line().split()
        if len(parts) != 3 or parts[:2] != ["---", name]:
            raise FormatError(f"expected '--- {name}' section")
        return int(parts[2])

    head = line().split()
    if len(head) != 2 or head[0] != MAGIC:
        raise FormatError("not an fqint container")
    if int(head[1]) != VERSION:
        raise FormatError(f"unsupported container version {head[1]}")
    metadata = {}
    for _ in range(section("metadata")):
        key, sep, value = line().partition(" = ")
        if not sep:
            raise FormatError("malformed metadata line")
        metadata[key] = json.loads(value)
    entries = []
    for _ in range(section("tensors")):
        parts = line().split()
        if len(parts) != 5 or parts[1] not in DTYPES:
            raise FormatError("malformed manifest line")
        name, tag, shape, offset, nbytes = parts
        dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
        entries.append((name, tag, dims, int(offset), int(nbytes)))
    size = section("payload")
    payload = stream.read()
    if len(payload) != size:
        raise FormatError(f"payload is {len(payload)} bytes, header says {size}")
    tensors = {}
    for name, tag, dims, offset, nbytes in entries:
        dt = np.dtype(DTYPES[tag])
        if offset + nbytes > size or nbytes != dt.itemsize * int(np.prod(dims, dtype=np.int64)):
            raise FormatError(f"tensor {name} has inconsistent extent")
        arr = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize, offset=offset)
        tensors[name] = arr.reshape(dims).astype(dt.newbyteorder("="))
    return tensors, metadata


def save(path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    Path(path).write_bytes(dumps(tensors, metadata))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
