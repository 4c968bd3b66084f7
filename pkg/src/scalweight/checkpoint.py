"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SCWT" | u32 version | u64 metadata length | UTF-8 JSON metadata
    | parameters (f64 LE) | optimizer state (f64 LE)

The metadata records the blob lengths, so a reader needs nothing else.
Serialization is canonical (sorted keys, compact separators, shortest
round-trip floats), which makes save -> load -> save byte-identical.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SCWT"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: np.ndarray
    optimizer: np.ndarray
    metadata: dict = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        params = np.ascontiguousarray(self.params, dtype="<f8")
        opt = np.ascontiguousarray(self.optimizer, dtype="<f8")
        meta = dict(self.metadata)
        meta["n_params"] = int(params.size)
        meta["n_optimizer"] = int(opt.size)
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
        return _HEADER.pack(MAGIC, self.version, len(blob)) + blob + params.tobytes() + opt.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _HEADER.size:
            raise CheckpointError("truncated checkpoint header")
        magic, version, n_meta = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = _HEADER.size
        meta = json.loads(data[start : start + n_meta].decode("utf-8"))
        start += n_meta
        n_p, n_o = meta["n_params"], meta["n_optimizer"]
        if len(data) != start + 8 * (n_p + n_o):
            raise CheckpointError("checkpoint length does not match its metadata")
        params = np.frombuffer(data, dtype="<f8", count=n_p, offset=start).astype(np.float64)
        opt = np.frombuffer(data, dtype="<f8", count=n_o, offset=start + 8 * n_p).astype(np.float64)
        return cls(params, opt, meta, version)

    def save(self, path):
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def atomic_write(path, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trainer_checkpoint(trainer, **metadata) -> Checkpoint:
    state = trainer.get_state()
    meta = {
        "epoch": state["epoch"],
        "step": state["step"],
        "optimizer_t": state["optimizer_t"],
        "optimizer_kind": trainer.optimizer.config.kind,
        "rng": state["rng"],
        "adaptive_s": state["adaptive_s"],
    }
    meta.update(metadata)
    return Checkpoint(state["params"], state["optimizer"], meta)


def restore_trainer(trainer, ckpt: Checkpoint, restore_rng: bool = True):
    meta = ckpt.metadata
    trainer.set_state(
        {
            "params": ckpt.params,
            "optimizer": ckpt.optimizer,
            "optimizer_t": meta["optimizer_t"],
            "step": meta["step"],
            "epoch": meta["epoch"],
            "rng": meta.get("rng") if restore_rng else None,
            "adaptive_s": meta.get("adaptive_s"),
        }
    )
    return trainer


class CheckpointStore:
    """Member checkpoints as bytes, in memory and optionally on disk."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self._data: dict = {}

    def put(self, key, data: bytes):
        self._data[key] = data
        if self.directory is not None:
            atomic_write(self.directory / f"{key}.scwt", data)

    def get(self, key) -> bytes:
        return self._data[key]

    def __contains__(self, key):
        return key in self._data
