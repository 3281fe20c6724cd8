"""Portable model checkpoints: a length-prefixed JSON manifest followed by a
raw little-endian float32 parameter blob in one container file.

The manifest indexes every array a reload needs (parameters plus batch-norm
running moments) by name, shape, and byte offset, and carries the
architecture string, input width, final softmax temperature, training
metadata (seed, config echo, normalization statistics), and optionally the
discretized routing table. Weights are down-converted to float32 on save and
promoted back to float64 on load, so a reloaded model reproduces eval-mode
outputs to float32 rounding (about 1e-7 relative) rather than bit-exactly.

Nothing non-deterministic (timestamps, hostnames) is written: identical
models under identical metadata serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .analysis import RoutingTable
from .errors import CheckpointError
from .model import ArchSpec, Model, build, parse_arch

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


def save_checkpoint(
    path,
    spec: ArchSpec,
    arrays: list[tuple[str, np.ndarray]],
    final_tau: float,
    metadata: dict | None = None,
    routing_table: RoutingTable | None = None,
) -> None:
    entries = []
    blob = bytearray()
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(blob)})
        blob.extend(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": spec.text,
        "d": spec.d,
        "seed": spec.seed,
        "branching": spec.branching,
        "final_tau": final_tau,
        "metadata": metadata or {},
        "params": entries,
        "blob_bytes": len(blob),
    }
    if routing_table is not None:
        manifest["routing_table"] = {
            "slot_to_feature": [int(v) for v in routing_table.slot_to_feature],
            "row_confidence": [float(v) for v in routing_table.row_confidence],
            "k": routing_table.k,
            "m": routing_table.m,
            "d": routing_table.d,
        }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(payload)))
        fh.write(payload)
        fh.write(bytes(blob))


def save_model(path, model: Model, final_tau: float | None = None, metadata=None, routing_table=None):
    save_checkpoint(
        path,
        model.spec,
        model.state_arrays(),
        model.temperature if final_tau is None else final_tau,
        metadata=metadata,
        routing_table=routing_table,
    )


@dataclass
class LoadedCheckpoint:
    model: Model
    manifest: dict
    routing_table: RoutingTable | None


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(_LEN.size)
        if len(head) != _LEN.size:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = _LEN.unpack(head)
        payload = fh.read(n)
        if len(payload) != n:
            raise CheckpointError(f"{path}: truncated manifest")
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad manifest: {exc}") from exc


def load_checkpoint(path) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        head = fh.read(_LEN.size)
        if len(head) != _LEN.size:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = _LEN.unpack(head)
        payload = fh.read(n)
        if len(payload) != n:
            raise CheckpointError(f"{path}: truncated manifest")
        blob = fh.read()
    try:
        manifest = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {manifest.get('format_version')}")
    if manifest.get("blob_bytes") != len(blob):
        raise CheckpointError(
            f"blob length {len(blob)} does not match manifest ({manifest.get('blob_bytes')})"
        )

    spec = parse_arch(
        manifest["arch"],
        d=manifest["d"],
        seed=manifest.get("seed", 0),
        branching=manifest.get("branching", 2),
    )
    model = build(spec)
    available = dict(model.state_arrays())
    for entry in manifest["params"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if offset < 0 or end > len(blob):
            raise CheckpointError(f"{name}: blob slice [{offset}, {end}) out of range")
        if name not in available:
            raise CheckpointError(f"{name}: not a parameter of arch {manifest['arch']!r}")
        dst = available.pop(name)
        if dst.shape != shape:
            raise CheckpointError(f"{name}: shape {shape} != expected {dst.shape}")
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        dst[:] = values.reshape(shape).astype(np.float64)
    if available:
        raise CheckpointError(f"checkpoint is missing arrays: {sorted(available)}")
    model.set_temperature(float(manifest["final_tau"]))

    table = None
    if "routing_table" in manifest:
        rt = manifest["routing_table"]
        table = RoutingTable(
            np.asarray(rt["slot_to_feature"], dtype=np.int64),
            np.asarray(rt["row_confidence"], dtype=np.float64),
            rt["k"],
            rt["m"],
            rt["d"],
        )
    return LoadedCheckpoint(model=model, manifest=manifest, routing_table=table)
