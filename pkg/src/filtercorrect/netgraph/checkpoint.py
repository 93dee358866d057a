"""Binary checkpoint format.

Layout::

    b"DCKP" | u32 version | u64 topology length | topology (canonical JSON, UTF-8)
    | tensor records: u32 rank, u32 dims..., float32 little-endian data

The topology lists every node (kind, config, inputs, trainable flag, group),
the graph sites and metadata, the order of the tensor records, and a SHA-256
digest of the record bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..nn.graph import ModelGraph
from ..nn.layers import layer_from_config

MAGIC = b"DCKP"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or inconsistent checkpoint file."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _tensor_list(graph):
    for n in graph.nodes:
        for name, arr in n.layer.params.items():
            yield n.id, "param", name, arr
        for name, arr in n.layer.buffers.items():
            yield n.id, "buffer", name, arr


def _encode_tensors(graph):
    parts, index = [], []
    for node_id, slot, name, arr in _tensor_list(graph):
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
        index.append([node_id, slot, name])
    return b"".join(parts), index


def topology(graph, meta=None) -> dict:
    return {
        "name": graph.name,
        "input_shape": list(graph.input_shape),
        "nodes": [
            {
                "id": n.id,
                "kind": n.layer.kind,
                "config": n.layer.config(),
                "inputs": list(n.inputs),
                "trainable": bool(n.layer.trainable),
                "group": n.group,
            }
            for n in graph.nodes
        ],
        "sites": list(graph.sites),
        "meta": dict(graph.meta if meta is None else meta),
    }


def save_checkpoint(graph, path, meta=None):
    """Write ``graph`` to ``path``; ``meta`` overrides ``graph.meta`` if given."""
    payload, index = _encode_tensors(graph)
    topo = topology(graph, meta)
    topo["tensors"] = index
    topo["digest"] = hashlib.sha256(payload).hexdigest()
    blob = canonical_json(topo)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    return path


class _Reader:
    def __init__(self, data, name):
        self.data, self.pos, self.name = data, 0, name

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.name}: truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> ModelGraph:
    path = Path(path)
    data = path.read_bytes()
    r = _Reader(data, str(path))
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    (tlen,) = struct.unpack("<Q", r.take(8, "topology length"))
    try:
        topo = json.loads(r.take(tlen, "topology").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt topology blob: {exc}") from exc
    payload = data[r.pos :]
    if hashlib.sha256(payload).hexdigest() != topo.get("digest"):
        # distinguish a short file from altered bytes for a clearer message
        expected = _expected_payload_size(topo)
        if expected is not None and len(payload) < expected:
            raise CheckpointError(f"{path}: truncated tensor data ({len(payload)} of {expected} bytes)")
        raise CheckpointError(f"{path}: tensor digest mismatch")

    g = ModelGraph(topo["input_shape"], name=topo["name"])
    for nd in topo["nodes"]:
        layer = layer_from_config(nd["kind"], nd["config"])
        layer.trainable = nd["trainable"]
        g.add(nd["id"], layer, nd["inputs"], nd.get("group"))
    g.sites = list(topo["sites"])
    g.meta = dict(topo["meta"])

    pr = _Reader(payload, str(path))
    for node_id, slot, name in topo["tensors"]:
        (rank,) = struct.unpack("<I", pr.take(4, "tensor rank"))
        dims = struct.unpack(f"<{rank}I", pr.take(4 * rank, "tensor dims"))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(pr.take(4 * count, f"{node_id}.{name}"), dtype="<f4").reshape(dims)
        layer = g.node(node_id).layer
        store = layer.params if slot == "param" else layer.buffers
        if name not in store or store[name].shape != arr.shape:
            raise CheckpointError(f"{path}: tensor {node_id}.{name} does not match the topology")
        store[name] = arr.astype(np.float32)
    if pr.pos != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - pr.pos} trailing bytes after tensor data")
    g.validate()
    return g


def _expected_payload_size(topo):
    try:
        total = 0
        for nd in topo["nodes"]:
            layer = layer_from_config(nd["kind"], nd["config"])
            for arr in list(layer.params.values()) + list(layer.buffers.values()):
                total += 4 + 4 * arr.ndim + 4 * arr.size
        return total
    except Exception:
        return None
