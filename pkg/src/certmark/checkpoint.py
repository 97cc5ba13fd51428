"""Versioned binary checkpoints for parameters, models, and trajectories.

Layout: 4-byte magic, u32 format version, u32 header length, UTF-8 JSON
header, then the declared snapshots' blocks as raw little-endian float64.
The encoding has no timestamps and the header is serialized with sorted
keys, so identical contents always produce identical bytes; round-trips are
bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointFormatError, InvalidArgumentError
from .params import LayeredParams, TrainingTrajectory

_MAGIC = b"CMK1"
_VERSION = 1


def _encode(kind: str, dims: tuple[int, ...], snapshots, meta: dict) -> bytes:
    header = {
        "kind": kind,
        "version": _VERSION,
        "dims": list(dims),
        "n_snapshots": len(snapshots),
        "meta": meta,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<II", _VERSION, len(header_bytes))
    out += header_bytes
    for snap in snapshots:
        for block in snap:
            arr = np.ascontiguousarray(block, dtype="<f8")
            out += arr.tobytes()
    return bytes(out)


def _decode(raw: bytes) -> tuple[dict, list[list[np.ndarray]]]:
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise CheckpointFormatError("truncated checkpoint header")
    try:
        header = json.loads(raw[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint header: {exc}") from exc
    dims = [int(d) for d in header["dims"]]
    n_snapshots = int(header["n_snapshots"])
    expected = 8 * sum(dims) * n_snapshots
    payload = raw[header_end:]
    if len(payload) != expected:
        raise CheckpointFormatError(
            f"payload size {len(payload)} does not match header ({expected} expected)"
        )
    snapshots = []
    offset = 0
    for _ in range(n_snapshots):
        blocks = []
        for d in dims:
            blocks.append(
                np.frombuffer(payload, dtype="<f8", count=d, offset=offset).copy()
            )
            offset += 8 * d
        snapshots.append(blocks)
    return header, snapshots


def _write(path, data: bytes) -> None:
    Path(path).write_bytes(data)


def _read(path) -> bytes:
    return Path(path).read_bytes()


def save_params(path, params: LayeredParams, meta: dict | None = None) -> None:
    _write(path, _encode("params", params.dims, [params.blocks], meta or {}))


def load_params(path) -> LayeredParams:
    header, snapshots = _decode(_read(path))
    if header["kind"] != "params":
        raise CheckpointFormatError(f"expected a params checkpoint, got {header['kind']!r}")
    return LayeredParams(snapshots[0])


def save_model(path, kind: str, params: LayeredParams, arch: dict) -> None:
    """Store a model checkpoint: parameter blocks plus an architecture descriptor."""
    if kind not in ("generator", "classifier"):
        raise InvalidArgumentError(f"unknown model kind {kind!r}")
    _write(path, _encode(kind, params.dims, [params.blocks], {"arch": arch}))


def load_model(path, expected_kind: str) -> tuple[LayeredParams, dict]:
    header, snapshots = _decode(_read(path))
    if header["kind"] != expected_kind:
        raise CheckpointFormatError(
            f"expected a {expected_kind} checkpoint, got {header['kind']!r}"
        )
    return LayeredParams(snapshots[0]), dict(header["meta"]["arch"])


def save_trajectory(path, traj: TrainingTrajectory) -> None:
    meta: dict[str, Any] = {
        "steps": list(traj.steps),
        "dataset_tag": traj.dataset_tag,
        "learning_rate": traj.learning_rate,
    }
    snapshots = [p.blocks for _, p in traj.snapshots]
    _write(path, _encode("trajectory", traj.dims, snapshots, meta))


def load_trajectory(path) -> TrainingTrajectory:
    header, snapshots = _decode(_read(path))
    if header["kind"] != "trajectory":
        raise CheckpointFormatError(
            f"expected a trajectory checkpoint, got {header['kind']!r}"
        )
    meta = header["meta"]
    steps = [int(s) for s in meta["steps"]]
    if len(steps) != len(snapshots):
        raise CheckpointFormatError("snapshot count does not match recorded steps")
    return TrainingTrajectory(
        snapshots=tuple(
            (t, LayeredParams(blocks)) for t, blocks in zip(steps, snapshots)
        ),
        dataset_tag=str(meta.get("dataset_tag", "")),
        learning_rate=float(meta.get("learning_rate", float("nan"))),
    )
