"""Binary model checkpoints: magic, version, JSON header, raw float64 parameters.

Layout::

    b"GCPCKPT\\0" | u32 version | u64 header length | header JSON | float64 LE data

The header records the graph, input width, training config, loss weights,
parameter count and a sha256 of the data block. Files are written to a
temporary name and renamed so a crash never leaves a partial checkpoint.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointIOError, VersionMismatch
from .graph import build_graph
from .model import GcpModel, TrainConfig

MAGIC = b"GCPCKPT\0"
VERSION = 1
_PRELUDE = struct.Struct("<8sIQ")


def to_bytes(model: GcpModel) -> bytes:
    data = np.ascontiguousarray(model.flat, dtype="<f8").tobytes()
    header = {
        "graph": model.graph.to_spec(),
        "d_in": model.d_in,
        "config": model.config.to_dict(),
        "loss_weights": model.loss_weights,
        "n_params": model.n_params,
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PRELUDE.pack(MAGIC, VERSION, len(hb)) + hb + data


def from_bytes(blob: bytes) -> GcpModel:
    if len(blob) < _PRELUDE.size:
        raise CheckpointIOError("checkpoint truncated")
    magic, version, hlen = _PRELUDE.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointIOError("not a checkpoint file")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    start = _PRELUDE.size
    if len(blob) < start + hlen:
        raise CheckpointIOError("checkpoint header truncated")
    try:
        header = json.loads(blob[start : start + hlen])
    except ValueError as e:
        raise CheckpointIOError("corrupted checkpoint header") from e
    data = blob[start + hlen :]
    try:
        n = int(header["n_params"])
        if len(data) != 8 * n:
            raise CheckpointIOError(f"expected {8 * n} data bytes, found {len(data)}")
        if hashlib.sha256(data).hexdigest() != header["sha256"]:
            raise CheckpointIOError("checkpoint data checksum mismatch")
        flat = np.frombuffer(data, dtype="<f8").astype(np.float64)
        graph = build_graph(header["graph"])
        return GcpModel(graph, header["d_in"], TrainConfig.from_dict(header["config"]), header["loss_weights"], flat)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointIOError):
            raise
        raise CheckpointIOError(f"corrupted checkpoint: {e}") from e


def checkpoint_save(model: GcpModel, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(to_bytes(model))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointIOError(f"cannot write checkpoint {path}: {e}") from e


def checkpoint_load(path: str | Path) -> GcpModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {e}") from e
    return from_bytes(blob)
