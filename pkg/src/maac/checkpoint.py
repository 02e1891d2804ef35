"""Single-file checkpoint container.

Layout::

    b"MAACCKPT"                 8-byte magic
    uint64 little-endian        length of the JSON header in bytes
    JSON header (UTF-8)         schema, config, config hash, counters, tensor directory
    payloads                    raw little-endian float64 arrays, in directory order

The header is serialised with sorted keys and no whitespace so that
save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from maac.numcore import ParamTensor

MAGIC = b"MAACCKPT"
SCHEMA_VERSION = 1
SLOTS = ("value", "adam_m", "adam_v")
_DTYPE = np.dtype("<f8")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: dict
    config_hash: str
    counters: dict
    tensors: dict[str, dict[str, np.ndarray]]  # name -> slot -> array
    step_counts: dict[str, int]

    @classmethod
    def from_tensors(cls, config: dict, config_hash: str, counters: dict,
                     named: dict[str, ParamTensor]) -> "Checkpoint":
        tensors = {name: {s: getattr(p, s).copy() for s in SLOTS} for name, p in named.items()}
        steps = {name: int(p.step_count) for name, p in named.items()}
        return cls(config, config_hash, counters, tensors, steps)

    def apply(self, named: dict[str, ParamTensor]) -> None:
        """Copy stored values and optimiser state into live tensors."""
        missing = sorted(set(named) ^ set(self.tensors))
        if missing:
            raise CheckpointError(f"checkpoint tensors do not match the model: {missing[:5]}")
        for name, p in named.items():
            for s in SLOTS:
                arr = self.tensors[name][s]
                if arr.shape != p.value.shape:
                    raise CheckpointError(f"{name}.{s}: shape {arr.shape} != model {p.value.shape}")
                getattr(p, s)[...] = arr
            p.step_count = self.step_counts[name]

    def params_digest(self) -> str:
        """SHA-256 over tensor values only (not optimiser state)."""
        return _digest({name: slots["value"] for name, slots in self.tensors.items()})


def params_digest(named: dict[str, ParamTensor]) -> str:
    """SHA-256 over live tensor values, comparable with :meth:`Checkpoint.params_digest`."""
    return _digest({name: p.value for name, p in named.items()})


def _digest(values: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(values):
        h.update(name.encode())
        h.update(np.ascontiguousarray(values[name], dtype=_DTYPE).tobytes())
    return h.hexdigest()


def write(ckpt: Checkpoint, out: BinaryIO) -> None:
    directory = []
    payloads = []
    offset = 0
    for name in sorted(ckpt.tensors):
        for s in SLOTS:
            arr = np.ascontiguousarray(ckpt.tensors[name][s], dtype=_DTYPE)
            blob = arr.tobytes()
            directory.append({"name": name, "slot": s, "shape": list(arr.shape),
                              "offset": offset, "nbytes": len(blob)})
            payloads.append(blob)
            offset += len(blob)
    header = {
        "schema": SCHEMA_VERSION,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "counters": ckpt.counters,
        "step_counts": {k: ckpt.step_counts[k] for k in sorted(ckpt.step_counts)},
        "tensors": directory,
        "dtype": "float64-le",
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out.write(MAGIC)
    out.write(struct.pack("<Q", len(raw)))
    out.write(raw)
    for blob in payloads:
        out.write(blob)


def read(inp: BinaryIO) -> Checkpoint:
    if inp.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    size_bytes = inp.read(8)
    if len(size_bytes) != 8:
        raise CheckpointError("truncated checkpoint header")
    (size,) = struct.unpack("<Q", size_bytes)
    try:
        header = json.loads(inp.read(size).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("schema") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema {header.get('schema')!r}")
    body = inp.read()
    tensors: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(body):
            raise CheckpointError(f"truncated payload for {entry['name']}.{entry['slot']}")
        arr = np.frombuffer(body, dtype=_DTYPE, count=n // 8, offset=start).reshape(entry["shape"]).copy()
        tensors.setdefault(entry["name"], {})[entry["slot"]] = arr
    return Checkpoint(header["config"], header["config_hash"], header["counters"], tensors,
                      dict(header["step_counts"]))


def save(ckpt: Checkpoint, path: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        write(ckpt, fh)
    os.replace(tmp, path)


def load(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            return read(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
