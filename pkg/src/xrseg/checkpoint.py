"""Versioned little-endian checkpoint files.

Layout::

    b"XRSEGCKP" | u32 version | u32 len + UTF-8 key=value header | u32 count
    count × ( u16 len + name | u8 rank | rank × u32 dims | f32 payload )

The header carries the ModelSpec plus ``epoch`` and ``adam_t``. Batch-norm
running statistics are stored as ``<layer>.running_mean``/``running_var``
records and Adam moments as ``adam.m.<param>``/``adam.v.<param>``.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import Model, ModelSpec, build_model

MAGIC = b"XRSEGCKP"
VERSION = 1


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def _records(model: Model, state: AdamState | None) -> list[tuple[str, np.ndarray]]:
    out = [(name, t.data) for name, t in model.params.items()]
    for name, stats in model.buffers.items():
        out.append((f"{name}.running_mean", stats.mean))
        out.append((f"{name}.running_var", stats.var))
    if state is not None:
        for name in model.params:
            if name in state.m:
                out.append((f"adam.m.{name}", state.m[name]))
                out.append((f"adam.v.{name}", state.v[name]))
    return out


def checkpoint_bytes(model: Model, state: AdamState | None = None, epoch: int = 0) -> bytes:
    header = model.spec.to_text() + f"\nepoch={epoch}\nadam_t={state.t if state is not None else -1}\n"
    htext = header.encode("utf-8")
    records = _records(model, state)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(htext)))
    buf.write(htext)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, state: AdamState | None, epoch: int, path: str | os.PathLike) -> None:
    """Write atomically: a crash mid-write leaves the previous file intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, state, epoch))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(f"truncated payload: need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_header(text: str) -> dict[str, str]:
    kv = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    return kv


def load_checkpoint(
    path: str | os.PathLike, expect_spec: ModelSpec | None = None, expect_arch: str | None = None
) -> tuple[Model, AdamState | None, int]:
    """Rebuild the model, optimizer state and epoch index stored at ``path``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise BadMagicError(f"{path} is not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (hlen,) = r.unpack("<I")
    header = parse_header(r.take(hlen).decode("utf-8"))
    spec = ModelSpec.from_mapping(header)
    if expect_arch is not None and spec.arch != expect_arch:
        raise SpecMismatchError(f"checkpoint holds a {spec.arch} model, expected {expect_arch}")
    if expect_spec is not None and spec != expect_spec:
        raise SpecMismatchError(f"checkpoint spec {spec} != expected {expect_spec}")

    model = build_model(spec)
    adam_t = int(header.get("adam_t", -1))
    state = AdamState(t=adam_t) if adam_t >= 0 else None
    targets: dict[str, np.ndarray] = {name: t.data for name, t in model.params.items()}
    for name, stats in model.buffers.items():
        targets[f"{name}.running_mean"] = stats.mean
        targets[f"{name}.running_var"] = stats.var

    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        if name.startswith("adam."):
            kind, _, pname = name[5:].partition(".")
            if state is None or kind not in ("m", "v") or pname not in model.params:
                raise UnknownTensorError(f"unexpected optimizer record {name!r}")
            getattr(state, kind)[pname] = payload.astype(model.dtype)
            continue
        if name not in targets:
            raise UnknownTensorError(f"tensor {name!r} does not belong to a {spec.arch} model")
        if targets[name].shape != tuple(dims):
            raise UnknownTensorError(f"tensor {name!r} has shape {tuple(dims)}, model expects {targets[name].shape}")
        targets[name][...] = payload
        seen.add(name)
    missing = sorted(set(targets) - seen)
    if missing:
        raise UnknownTensorError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after the last tensor")
    return model, state, int(header.get("epoch", 0))
