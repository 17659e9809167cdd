"""Bit-exact model container (`.snnm`).

Layout: 4 magic bytes `SNNM`, a little-endian uint64 header length, a JSON
header (graph structure, tensor shapes, byte offsets, SHA-256 of the blob),
then a binary section of little-endian float32 tensors, row-major. The JSON
header is serialised with sorted keys so identical models produce identical
files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    ContainerChecksumError,
    ContainerHeaderError,
    ContainerTruncatedError,
)
from .graph import LayerKind, LayerNode, ModelGraph, ResidualBlockSpec

MAGIC = b"SNNM"
FORMAT_VERSION = 1


def _write_container(path, role: str, payload: dict, tensors: dict[str, np.ndarray]) -> None:
    table = {}
    blob_parts = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        table[name] = {"shape": list(arr.shape), "dtype": "float32",
                       "offset": offset, "nbytes": len(raw)}
        blob_parts.append(raw)
        offset += len(raw)
    blob = b"".join(blob_parts)
    header = {
        "format_version": FORMAT_VERSION,
        "role": role,
        "payload": payload,
        "tensors": table,
        "blob_nbytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(blob)


def _read_container(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise ContainerHeaderError(f"{path}: not a model container (bad magic bytes)")
    (header_len,) = struct.unpack("<Q", data[4:12])
    if len(data) < 12 + header_len:
        raise ContainerTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(data[12:12 + header_len])
    except json.JSONDecodeError as e:
        raise ContainerHeaderError(f"{path}: malformed header JSON: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerHeaderError(
            f"{path}: unsupported format version {header.get('format_version')!r}"
        )
    blob = data[12 + header_len:]
    if len(blob) < header["blob_nbytes"]:
        raise ContainerTruncatedError(
            f"{path}: blob is {len(blob)} bytes, header declares {header['blob_nbytes']}"
        )
    blob = blob[: header["blob_nbytes"]]
    digest = hashlib.sha256(blob).hexdigest()
    if digest != header["blob_sha256"]:
        raise ContainerChecksumError(
            f"{path}: blob checksum mismatch (expected {header['blob_sha256']}, got {digest})"
        )
    tensors = {}
    for name, entry in header["tensors"].items():
        raw = blob[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        tensors[name] = arr
    return header["role"], header["payload"], tensors


def _encode_nodes(nodes: dict[int, LayerNode], tensors: dict[str, np.ndarray]) -> list[dict]:
    encoded = []
    for node in nodes.values():
        entry = {
            "id": node.id,
            "kind": node.kind.value,
            "attrs": node.attrs,
            "inputs": node.inputs,
            "params": {},
        }
        for pname, arr in node.params.items():
            key = f"node{node.id}.{pname}"
            tensors[key] = arr
            entry["params"][pname] = key
        encoded.append(entry)
    return encoded


def _decode_nodes(encoded: list[dict], tensors: dict[str, np.ndarray]) -> dict[int, LayerNode]:
    nodes = {}
    for entry in encoded:
        params = {pname: tensors[key] for pname, key in entry["params"].items()}
        nodes[entry["id"]] = LayerNode(
            id=entry["id"],
            kind=LayerKind(entry["kind"]),
            params=params,
            attrs=entry["attrs"],
            inputs=list(entry["inputs"]),
        )
    return nodes


def save_model(g: ModelGraph, path) -> None:
    """Persist a graph; `load_model(save_model(g))` is bit-exact."""
    tensors: dict[str, np.ndarray] = {}
    payload = {
        "nodes": _encode_nodes(g.nodes, tensors),
        "meta": g.meta,
        "blocks": [vars(b) for b in g.blocks],
    }
    _write_container(path, "ann", payload, tensors)


def load_model(path) -> ModelGraph:
    role, payload, tensors = _read_container(path)
    if role != "ann":
        raise ContainerHeaderError(f"{path}: container holds a {role!r}, expected an ANN model")
    nodes = _decode_nodes(payload["nodes"], tensors)
    blocks = [ResidualBlockSpec(**b) for b in payload.get("blocks", [])]
    return ModelGraph(nodes, meta=payload.get("meta", {}), blocks=blocks)


def save_snn(snn, path) -> None:
    """Persist a spiking network in the same container with an SNN role flag."""
    tensors: dict[str, np.ndarray] = {}
    payload = {
        "nodes": _encode_nodes(snn.graph.nodes, tensors),
        "meta": snn.graph.meta,
        "blocks": [vars(b) for b in snn.graph.blocks],
        "snn_meta": snn.meta,
        "threshold": snn.threshold,
    }
    _write_container(path, "snn", payload, tensors)


def load_snn(path):
    from .simulate import SpikingNetwork

    role, payload, tensors = _read_container(path)
    if role != "snn":
        raise ContainerHeaderError(f"{path}: container holds a {role!r}, expected an SNN")
    nodes = _decode_nodes(payload["nodes"], tensors)
    blocks = [ResidualBlockSpec(**b) for b in payload.get("blocks", [])]
    graph = ModelGraph(nodes, meta=payload.get("meta", {}), blocks=blocks)
    return SpikingNetwork(
        graph=graph,
        threshold=float(payload.get("threshold", 1.0)),
        meta=payload.get("snn_meta", {}),
    )
