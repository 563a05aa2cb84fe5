"""Attention-map and word-feature exports for plotting.

Files are written in a small self-describing binary (``TNTA``) and, when the
path ends in ``.csv``, as plain comma-separated rows instead.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import Model, forward_features
from .tokenizer import FormatError

MAGIC = b"TNTA"


class ExportError(ValueError):
    pass


@dataclass
class AttnDump:
    layer: int
    level: str  # "inner" | "outer"
    head: int | str  # head index or "mean"
    matrix: np.ndarray
    sentence: int | None = None
    meta: dict = field(default_factory=dict)


def write_tnta(path, array: np.ndarray, meta: dict | None = None) -> None:
    """magic, u32 meta_len, meta json, u32 rank, u64 dims, little-endian f64."""
    a = np.ascontiguousarray(array, dtype="<f8")
    raw = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", a.ndim))
        f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        f.write(a.tobytes())


def read_tnta(path) -> tuple[np.ndarray, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a TNTA file")
    (mlen,) = struct.unpack_from("<I", blob, 4)
    meta = json.loads(blob[8 : 8 + mlen])
    off = 8 + mlen
    (rank,) = struct.unpack_from("<I", blob, off)
    shape = struct.unpack_from(f"<{rank}Q", blob, off + 4)
    off += 4 + 8 * rank
    data = np.frombuffer(blob, dtype="<f8", offset=off).astype(np.float64)
    return data.reshape(shape), meta


def write_csv(path, array: np.ndarray) -> None:
    a = np.asarray(array)
    if a.ndim == 1:
        a = a[None, :]
    a = a.reshape(-1, a.shape[-1])
    np.savetxt(path, a, delimiter=",", fmt="%.17g")


def _write(path, array: np.ndarray, meta: dict) -> None:
    if path is None:
        return
    if str(path).endswith(".csv"):
        write_csv(path, array)
    else:
        write_tnta(path, array, meta)


def _traces(model: Model, img: np.ndarray) -> tuple[list[dict], list]:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    traces: list[dict] = []
    with ad.no_grad():
        _, _, words = forward_features(model, img, training=False, traces=traces)
    return traces, words


def _check_layer(model: Model, layer: int) -> None:
    if not 1 <= layer <= model.config.depth:
        raise ExportError(f"layer {layer} is outside 1..{model.config.depth}")


def _pick_head(maps: np.ndarray, head) -> np.ndarray:
    if head == "mean" or head is None:
        return maps.mean(axis=-3)
    h = int(head)
    if not 0 <= h < maps.shape[-3]:
        raise ExportError(f"head {h} is outside 0..{maps.shape[-3] - 1}")
    return maps[..., h, :, :]


def export_inner_attention(model: Model, img, layer: int, sentence: int, head=0, path=None) -> AttnDump:
    """m x m word attention of one sentence; row i is query word i."""
    cfg = model.config
    _check_layer(model, layer)
    if not cfg.is_tnt_layer(layer):
        raise ExportError(
            f"layer {layer} is a standard block in this mixed model (TNT layers: {cfg.indices}); "
            "it has no inner transformer to export"
        )
    if not 0 <= sentence < cfg.n:
        raise ExportError(f"sentence {sentence} is outside 0..{cfg.n - 1}")
    traces, _ = _traces(model, img)
    maps = traces[layer - 1]["inner"][0, sentence]  # (heads, m, m)
    mat = _pick_head(maps, head)
    k = cfg.patch_size // cfg.subpatch_size
    gw = cfg.grid[1]
    meta = {
        "layer": layer, "level": "inner", "sentence": sentence, "head": head,
        "patch_coord": [sentence // gw, sentence % gw],
        "query_coords": [[j // k, j % k] for j in range(cfg.m)],
        "word_grid": [k, k],
    }
    _write(path, mat, meta)
    return AttnDump(layer, "inner", head, mat, sentence, meta)


def export_outer_attention(model: Model, img, layer: int, head=0, path=None) -> AttnDump:
    """(n + 1) x (n + 1) sentence attention; token 0 is the class token."""
    cfg = model.config
    _check_layer(model, layer)
    traces, _ = _traces(model, img)
    mat = _pick_head(traces[layer - 1]["outer"][0], head)
    gw = cfg.grid[1]
    meta = {
        "layer": layer, "level": "outer", "head": head, "patch_grid": list(cfg.grid),
        "query_coords": [None] + [[i // gw, i % gw] for i in range(cfg.n)],
    }
    _write(path, mat, meta)
    return AttnDump(layer, "outer", head, mat, None, meta)


@dataclass
class ClassAttention:
    layer: int
    weights: np.ndarray  # (n,) class-token attention to each patch, heads averaged
    self_weight: float
    grid: tuple[int, int]

    def as_grid(self) -> np.ndarray:
        return self.weights.reshape(self.grid)


def export_class_attention(model: Model, img, layer: int, path=None) -> ClassAttention:
    cfg = model.config
    _check_layer(model, layer)
    traces, _ = _traces(model, img)
    row = traces[layer - 1]["outer"][0].mean(axis=0)[0]
    out = ClassAttention(layer, row[1:].copy(), float(row[0]), cfg.grid)
    _write(path, out.weights, {"layer": layer, "grid": list(cfg.grid), "self_weight": out.self_weight})
    return out


def export_word_feature_maps(model: Model, img, layer: int, path=None) -> np.ndarray:
    """Channel-averaged word embeddings per patch, ``(n, p/s, p/s)``.

    Layer 0 is the embedded input; layer l is the word state after layer l.
    """
    cfg = model.config
    if not 0 <= layer <= cfg.depth:
        raise ExportError(f"layer {layer} is outside 0..{cfg.depth}")
    _, words = _traces(model, img)
    k = cfg.patch_size // cfg.subpatch_size
    maps = words[layer].data[0].mean(axis=-1).reshape(cfg.n, k, k)
    _write(path, maps, {"layer": layer, "patch_grid": list(cfg.grid), "word_grid": [k, k]})
    return maps
