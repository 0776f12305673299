"""Checkpoint files.

Layout: a magic line, one line of canonical JSON (format version, config
echo, training counters, RNG state, the array directory with dtype / shape /
offset, and a SHA-256 digest of the payload), then the little-endian raw
arrays back to back.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"MIRRORSAT-CHECKPOINT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, Any]
    arrays: dict[str, np.ndarray]
    iteration: int = 0
    rng_state: dict[str, Any] | None = None
    meta: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def model_state(self) -> dict[str, np.ndarray]:
        return {k[len("model/"):]: v for k, v in self.arrays.items() if k.startswith("model/")}

    def optim_state(self) -> dict[str, np.ndarray]:
        return {k[len("optim/"):]: v for k, v in self.arrays.items() if k.startswith("optim/")}


def to_bytes(ckpt: Checkpoint) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        directory.append(dict(name=name, dtype=le.dtype.str, shape=list(arr.shape), offset=offset,
                              nbytes=len(raw)))
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = dict(format_version=ckpt.format_version, config=ckpt.config, iteration=ckpt.iteration,
                  rng_state=ckpt.rng_state, meta=ckpt.meta, arrays=directory,
                  payload_bytes=len(payload), digest="sha256:" + hashlib.sha256(payload).hexdigest())
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    return MAGIC + line + payload


def from_bytes(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    payload = data[end + 1:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"checkpoint payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    digest = "sha256:" + hashlib.sha256(payload).hexdigest()
    if digest != header["digest"]:
        raise CheckpointError("checkpoint digest mismatch: payload corrupted")
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(config=header["config"], arrays=arrays, iteration=header["iteration"],
                      rng_state=header["rng_state"], meta=header["meta"], format_version=version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
