"""
Checkpoint container.

Layout (all little-endian):

    b"MMOECKPT" | uint64 header length | JSON header | payload

The header holds the schema tag, the ModelConfig, optional metadata and one
entry per stored array ({"name", "shape", "dtype", "offset", "nbytes"}, offsets
relative to the payload start). Parameters are "<f8"; the hash-routing table
is stored as "<i8" under HASH_TABLE_ENTRY. Factored matrices are stored as
"<name>.u" (p x r) and "<name>.v" (r x q) and rebuilt as u @ v on load.

Bytes depend only on the model and metadata: JSON keys are sorted and no
timestamps are written, so seeded reruns produce identical files.
"""
from __future__ import annotations

import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError
from .model import EncoderModel, param_shapes
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"MMOECKPT"
SCHEMA = "v1"
HASH_TABLE_ENTRY = "__hash_table__"
_LEN = struct.Struct("<Q")

PathLike = Union[str, Path]
Factors = Dict[str, Tuple[np.ndarray, np.ndarray]]


def save_checkpoint(model: EncoderModel, path: PathLike,
                    metadata: Optional[Dict[str, Any]] = None,
                    factored: Optional[Factors] = None) -> Path:
    """
    Write `model` to `path` (atomically, through a temporary sibling file).

    Args:
        factored: optional {param name: (u, v)}; those parameters are stored as
            their factors instead of the dense matrix.
    """
    path = Path(path)
    factored = factored or {}
    unknown = set(factored) - set(model.params)
    if unknown:
        raise CheckpointError(f"factored entries without a parameter: {sorted(unknown)}")

    arrays = []
    for name, tensor in model.params.items():
        if name in factored:
            u, v = factored[name]
            arrays.append((f"{name}.u", np.asarray(u, dtype="<f8")))
            arrays.append((f"{name}.v", np.asarray(v, dtype="<f8")))
        else:
            arrays.append((name, np.asarray(tensor.data, dtype="<f8")))
    if model.hash_table is not None:
        arrays.append((HASH_TABLE_ENTRY, np.asarray(model.hash_table, dtype="<i8")))

    entries, chunks, offset = [], [], 0
    for name, array in arrays:
        data = np.ascontiguousarray(array).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": array.dtype.str,
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)

    header = {
        "schema": SCHEMA,
        "config": model.config.to_dict(),
        "metadata": metadata or {},
        "tensors": entries,
        "factored": {name: {"rank": int(np.asarray(u).shape[1]), "shape": list(model.params[name].shape)}
                     for name, (u, _) in sorted(factored.items())},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(header_bytes)))
        fh.write(header_bytes)
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)
    logger.debug("wrote %s (%s, %d arrays)", path, model.config.label, len(entries))
    return path


def read_header(path: PathLike) -> Dict[str, Any]:
    header, _ = _read(path, header_only=True)
    return header


def _read(path: PathLike, header_only: bool = False):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a minimoe checkpoint (bad magic)")
    start = len(MAGIC) + _LEN.size
    if len(raw) < start:
        raise CheckpointError(f"{path} is truncated")
    (header_len,) = _LEN.unpack(raw[len(MAGIC):start])
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if header.get("schema") != SCHEMA:
        raise CheckpointError(f"{path}: unsupported schema {header.get('schema')!r}")
    if header_only:
        return header, {}

    payload = memoryview(raw)[start + header_len:]
    arrays: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path}: entry {entry['name']} runs past the end of the file")
        arrays[entry["name"]] = np.frombuffer(payload[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]).copy()
    return header, arrays


def load_checkpoint(path: PathLike, return_header: bool = False):
    """
    Rebuild the EncoderModel stored at `path`; factored weights are multiplied back out.

    Raises:
        CheckpointError: bad magic, schema, missing or mis-shaped parameters.
    """
    header, arrays = _read(path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except Exception as exc:
        raise CheckpointError(f"{path}: invalid config in header: {exc}") from exc

    params: Dict[str, Tensor] = {}
    for name, shape in param_shapes(config):
        if name in header.get("factored", {}):
            value = arrays[f"{name}.u"] @ arrays[f"{name}.v"]
        elif name in arrays:
            value = arrays[name]
        else:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if tuple(value.shape) != tuple(shape):
            raise CheckpointError(f"{path}: {name} has shape {value.shape}, expected {shape}")
        params[name] = Tensor(value, requires_grad=True)

    model = EncoderModel(config, params, arrays.get(HASH_TABLE_ENTRY))
    return (model, header) if return_header else model
