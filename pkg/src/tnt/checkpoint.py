"""Binary checkpoint format.

Little-endian layout::

    b"TNTC"  u32 version  u64 json_len  json (config + meta)
    u64 n_params, then n_params records:
        u32 name_len  name(utf-8)  u32 rank  u64 extents[rank]  f64 data[...]
    u8 has_optimizer
    if set: u64 step  u64 json_len  json (hyper-parameters)
            u64 n_moments, then records named "m/<param>" and "v/<param>"
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Model, TntConfig, build

MAGIC = b"TNTC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Model
    meta: dict = field(default_factory=dict)
    optimizer: object | None = None  # training.OptimState


def _write_record(buf, name: str, array: np.ndarray) -> None:
    raw = name.encode()
    a = np.ascontiguousarray(array, dtype="<f8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    buf.write(a.tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def record(self) -> tuple[str, np.ndarray]:
        (nlen,) = self.unpack("<I")
        name = self.take(nlen).decode()
        (rank,) = self.unpack("<I")
        shape = self.unpack(f"<{rank}Q") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
        return name, data.reshape(shape)


def to_bytes(model: Model, meta: dict | None = None, optimizer=None) -> bytes:
    buf = io.BytesIO()
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(header)))
    buf.write(header)
    params = model.named_parameters()
    buf.write(struct.pack("<Q", len(params)))
    for name, t in params:
        _write_record(buf, name, t.data)
    if optimizer is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        hyper = json.dumps(optimizer.hyper(), sort_keys=True).encode()
        buf.write(struct.pack("<QQ", optimizer.step, len(hyper)))
        buf.write(hyper)
        names = [n for n, _ in params if n in optimizer.m]
        buf.write(struct.pack("<Q", 2 * len(names)))
        for n in names:
            _write_record(buf, f"m/{n}", optimizer.m[n])
            _write_record(buf, f"v/{n}", optimizer.v[n])
    return buf.getvalue()


def save(model: Model, path, meta: dict | None = None, optimizer=None) -> None:
    Path(path).write_bytes(to_bytes(model, meta, optimizer))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a TNT checkpoint")
    version, hlen = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    try:
        header = json.loads(r.take(hlen))
        config = TntConfig.from_dict(header["config"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable config header ({exc})") from None

    model = build(config, seed=0)
    expected = dict(model.named_parameters())
    (count,) = r.unpack("<Q")
    seen = set()
    for _ in range(count):
        name, data = r.record()
        if name not in expected:
            raise CheckpointError(f"{path}: tensor {name!r} is not part of the configured model")
        if data.shape != expected[name].shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {data.shape}, config implies {expected[name].shape}"
            )
        expected[name].data = data.copy()
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")

    optimizer = None
    (flag,) = r.unpack("<B")
    if flag:
        from .training import OptimState

        step, jlen = r.unpack("<QQ")
        hyper = json.loads(r.take(jlen))
        optimizer = OptimState(
            lr=hyper["lr"], betas=tuple(hyper["betas"]), eps=hyper["eps"],
            weight_decay=hyper["weight_decay"], step=step,
        )
        (n_mom,) = r.unpack("<Q")
        for _ in range(n_mom):
            name, data = r.record()
            kind, pname = name.split("/", 1)
            (optimizer.m if kind == "m" else optimizer.v)[pname] = data.copy()
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return Checkpoint(model, header.get("meta", {}), optimizer)


def load(path) -> Model:
    return load_checkpoint(path).model
