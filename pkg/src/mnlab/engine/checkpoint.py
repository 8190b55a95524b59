"""Checkpoint container: a JSON header framed by a fixed preamble, then raw tensors.

Layout::

    b"MNLABCK\\0"          8-byte magic
    uint32 LE             format version
    uint64 LE             header length in bytes
    header                UTF-8 JSON (graph, dtype, seed, tensor index, extra)
    blobs                 little-endian raw floats, concatenated in index order

Headers are written with sorted keys and no timestamps, so identical states
produce identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..arch import ArchGraph
from .model import ModelState, validate_state

MAGIC = b"MNLABCK\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensors(state: ModelState):
    for lid in sorted(state.params):
        for name in sorted(state.params[lid]):
            yield "param", lid, name, state.params[lid][name]
    for lid in sorted(state.buffers):
        for name in sorted(state.buffers[lid]):
            yield "buffer", lid, name, state.buffers[lid][name]


def dumps(graph: ArchGraph, state: ModelState, extra: dict | None = None) -> bytes:
    le = np.dtype(state.dtype).newbyteorder("<")
    index, blobs, offset = [], [], 0
    for kind, lid, name, arr in _tensors(state):
        raw = np.ascontiguousarray(arr, dtype=le).tobytes()
        index.append({"kind": kind, "layer": lid, "name": name, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "graph": graph.to_dict(),
        "dtype": np.dtype(state.dtype).name,
        "seed": state.seed,
        "tensors": index,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + b"".join(blobs)


def loads(data: bytes) -> tuple[ArchGraph, ModelState, dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("not an mnlab checkpoint (bad magic)")
    if len(data) < 20:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    body = memoryview(data)[20 + hlen:]
    graph = ArchGraph.from_dict(header["graph"])
    le = np.dtype(header["dtype"]).newbyteorder("<")
    params: dict = {}
    buffers: dict = {}
    for t in header["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(body):
            raise CheckpointError(f"truncated checkpoint: tensor {t['layer']}.{t['name']} runs past end")
        arr = np.frombuffer(body[t["offset"]:end], dtype=le).astype(header["dtype"]).reshape(t["shape"])
        (params if t["kind"] == "param" else buffers).setdefault(t["layer"], {})[t["name"]] = arr
    # tensors are stored sorted; restore graph order
    order = [l.id for l in graph.layers]
    params = {lid: params[lid] for lid in order if lid in params}
    buffers = {lid: buffers[lid] for lid in order if lid in buffers}
    state = ModelState(params, buffers, dtype=header["dtype"], seed=header["seed"])
    validate_state(graph, state)
    return graph, state, header["extra"]


def save_checkpoint(path, graph: ArchGraph, state: ModelState, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps(graph, state, extra))


def load_checkpoint(path) -> tuple[ArchGraph, ModelState, dict]:
    return loads(Path(path).read_bytes())
