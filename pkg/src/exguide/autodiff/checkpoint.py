"""Binary checkpoint format.

Layout (little-endian)::

    b"VPEGCKPT" | version:u16 | records...
    record = name_len:u16 | name:utf-8 | rank:u8 | dims:u32*rank | payload:f64*prod(dims)

Metadata rides along as a zero-rank record whose name is ``__meta__/`` followed
by a JSON object.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .layers import ParamSet

MAGIC = b"VPEGCKPT"
VERSION = 1
META_PREFIX = "__meta__/"


class CheckpointError(ValueError):
    pass


def _write_record(buf, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"record name too long: {len(raw)} bytes")
    arr = np.asarray(arr, dtype="<f8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr).tobytes())


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    if meta is not None:
        _write_record(buf, META_PREFIX + json.dumps(meta, sort_keys=True), np.zeros(()))
    for name in arrays:
        _write_record(buf, name, arrays[name])
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("bad magic bytes")
    (version,) = struct.unpack_from("<H", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    arrays, meta = {}, {}
    while pos < len(data):
        try:
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(data):
                raise CheckpointError(f"truncated payload for {name!r}")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
        except struct.error as e:
            raise CheckpointError(f"truncated record at byte {pos}") from e
        if name.startswith(META_PREFIX):
            meta = json.loads(name[len(META_PREFIX):])
        else:
            arrays[name] = arr.astype(np.float64)
    return arrays, meta


def save(path, sections: dict[str, ParamSet], meta: dict | None = None) -> None:
    arrays = {}
    for sec, ps in sections.items():
        for name, p in ps:
            arrays[f"{sec}/{name}"] = p.value
        arrays[f"{sec}/__step__"] = np.array(float(ps.step))
    Path(path).write_bytes(dumps(arrays, meta))


def load(path, sections: dict[str, ParamSet]) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    arrays, meta = loads(path.read_bytes())
    for sec, ps in sections.items():
        state = {}
        for name, _ in ps:
            key = f"{sec}/{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint {path} lacks {key}")
            state[name] = arrays[key]
        ps.load_state(state)
        ps.step = int(arrays.get(f"{sec}/__step__", 0))
    return meta
