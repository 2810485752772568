"""LCKP checkpoints: a JSON config blob followed by named float32 tensors.

Layout (little-endian)::

    b"LCKP" | u32 version | u32 blob length | blob (utf-8 JSON)
    u32 tensor count
    per tensor: u32 name length | name | u32 rank | u32 dims[rank] | f32 payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import model_config_from_dict, to_dict
from .data import FormatError
from .models import Model, build_model

MAGIC = b"LCKP"
VERSION = 1


class CheckpointError(FormatError):
    """Unreadable or corrupted checkpoint."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint tensors do not fit the target model."""


def write_checkpoint(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        parts.append(struct.pack(f"<I{len(key)}sI{arr.ndim}I", len(key), key, arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def dims(self, rank: int) -> tuple[int, ...]:
        return struct.unpack(f"<{rank}I", self.take(4 * rank))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    r = _Reader(path.read_bytes(), path)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: unreadable config blob ({err})") from None
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = r.dims(rank)
        count = int(np.prod(dims))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return meta, tensors


def model_state(model: Model) -> dict[str, np.ndarray]:
    state = {name: p.data for name, p in model.named_parameters().items()}
    state.update(model.buffers())
    return state


def load_state(model: Model, tensors: dict[str, np.ndarray], source="checkpoint") -> None:
    """Copy matching tensors into ``model`` in place; names and shapes must agree exactly."""
    params = model.named_parameters()
    buffers = model.buffers()
    expected = set(params) | set(buffers)
    got = {k for k in tensors if not k.startswith("optim.")}
    if got != expected:
        extra, missing = sorted(got - expected), sorted(expected - got)
        raise CheckpointMismatchError(
            f"{source} does not match the model: unknown tensors {extra[:5]}, missing {missing[:5]}"
        )
    for name in expected:
        target = params[name].data if name in params else buffers[name]
        if tensors[name].shape != target.shape:
            raise CheckpointMismatchError(
                f"{source}: tensor {name} has shape {tensors[name].shape}, model expects {target.shape}"
            )
    for name, p in params.items():
        p.data = tensors[name].astype(p.data.dtype)
    for name, buf in buffers.items():
        buf[...] = tensors[name]


def save_checkpoint(path: str | Path, model: Model, extra_meta: dict | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    meta = {"model": to_dict(model.config), **(extra_meta or {})}
    tensors = model_state(model)
    tensors.update(extra_tensors or {})
    write_checkpoint(path, meta, tensors)


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[Model, dict, dict[str, np.ndarray]]:
    """Rebuild the model described by the checkpoint; returns (model, meta, all tensors)."""
    meta, tensors = read_checkpoint(path)
    if "model" not in meta:
        raise CheckpointError(f"{path}: config blob has no model section")
    model = build_model(model_config_from_dict(meta["model"]), seed=0, dtype=dtype)
    load_state(model, tensors, str(path))
    return model, meta, tensors
