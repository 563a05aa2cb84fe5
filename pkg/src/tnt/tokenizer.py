"""Image -> visual sentences (p x p patches) -> visual words (s x s sub-patches).

Patches are enumerated in raster order over the patch grid, words in raster
order inside each patch, and every word is flattened row-major over
(row, column, channel).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LinearParams, param, trunc_normal


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


def grid_shape(height: int, width: int, p: int, s: int) -> tuple[int, int, int]:
    """Return ``(n, m, word_dim)`` or raise if the sizes do not tile."""
    if p <= 0 or s <= 0 or height % p or width % p or p % s:
        raise ConfigError(
            f"image {height}x{width} cannot be tiled with patch p={p} and sub-patch s={s}: "
            "H and W must be divisible by p and p by s"
        )
    return (height // p) * (width // p), (p // s) ** 2, s * s * 3


def normalize_pixels(img: np.ndarray) -> np.ndarray:
    """Map [0, 255] pixels to [-1, 1]: (x/255 - 0.5)/0.5."""
    return (np.asarray(img, dtype=np.float64) / 255.0 - 0.5) / 0.5


def split_to_words(img: np.ndarray, p: int, s: int) -> np.ndarray:
    """``(..., H, W, 3)`` image(s) -> ``(..., n, m, s*s*3)`` word vectors."""
    img = np.asarray(img, dtype=np.float64)
    *lead, H, W, C = img.shape
    if C != 3:
        raise ConfigError(f"expected 3 channels, got {C}")
    grid_shape(H, W, p, s)
    gh, gw, k = H // p, W // p, p // s
    x = img.reshape(*lead, gh, k, s, gw, k, s, C)
    nl = len(lead)
    # (gh, k_r, s_r, gw, k_c, s_c, C) -> (gh, gw, k_r, k_c, s_r, s_c, C)
    perm = (*range(nl), nl, nl + 3, nl + 1, nl + 4, nl + 2, nl + 5, nl + 6)
    x = x.transpose(perm)
    return np.ascontiguousarray(x).reshape(*lead, gh * gw, k * k, s * s * C)


def assemble_words(words: np.ndarray, height: int, width: int, p: int, s: int) -> np.ndarray:
    """Inverse of :func:`split_to_words`."""
    words = np.asarray(words)
    *lead, n, m, wd = words.shape
    gh, gw, k = height // p, width // p, p // s
    x = words.reshape(*lead, gh, gw, k, k, s, s, 3)
    nl = len(lead)
    perm = (*range(nl), nl, nl + 2, nl + 4, nl + 1, nl + 3, nl + 5, nl + 6)
    return np.ascontiguousarray(x.transpose(perm)).reshape(*lead, height, width, 3)


@dataclass
class TokenizerParams:
    p: int
    s: int
    word_proj: LinearParams  # (s*s*3) -> c
    e_word: Tensor | None  # (m, c), one copy shared by every sentence
    e_sentence: Tensor | None  # (n + 1, d)
    z_class: Tensor  # (d,)
    z_sentences: Tensor | None = None  # (n, d), only when the sentence init is learnable

    @classmethod
    def init(
        cls,
        rng,
        p: int,
        s: int,
        n: int,
        c: int,
        d: int,
        word_pos: bool = True,
        sentence_pos: bool = True,
        class_learnable: bool = True,
        sentence_init_learnable: bool = False,
    ) -> TokenizerParams:
        m = (p // s) ** 2
        proj = LinearParams.init(rng, s * s * 3, c)
        # draw both encodings regardless of the switches so toggling one
        # leaves every other initial value unchanged
        e_word = trunc_normal(rng, (m, c))
        e_sentence = trunc_normal(rng, (n + 1, d))
        z_class = np.zeros(d)
        return cls(
            p=p,
            s=s,
            word_proj=proj,
            e_word=param(e_word) if word_pos else None,
            e_sentence=param(e_sentence) if sentence_pos else None,
            z_class=param(z_class) if class_learnable else Tensor(z_class),
            z_sentences=param(np.zeros((n, d))) if sentence_init_learnable else None,
        )


def embed_words(words, params: TokenizerParams) -> Tensor:
    """FC(Vec(word)) + E_word for every word of every sentence."""
    words = words if isinstance(words, Tensor) else Tensor(words)
    if words.shape[-1] != params.word_proj.weight.shape[0]:
        raise ad.DimensionError(
            f"word vectors of width {words.shape[-1]} do not fit projection "
            f"{params.word_proj.weight.shape}"
        )
    y = params.word_proj(words)
    if params.e_word is not None:
        y = ad.add(y, params.e_word)
    return y


def init_sentences(params: TokenizerParams, n: int, batch: int | None = None) -> Tensor:
    """Class token stacked on n zero sentence rows, plus E_sentence."""
    d = params.z_class.shape[0]
    cls_row = ad.reshape(params.z_class, (1, d))
    rows = params.z_sentences if params.z_sentences is not None else Tensor(np.zeros((n, d)))
    z = ad.concat([cls_row, rows], axis=0)
    if params.e_sentence is not None:
        if params.e_sentence.shape[0] != n + 1:
            raise ad.DimensionError(
                f"sentence encoding has {params.e_sentence.shape[0]} rows, need {n + 1}"
            )
        z = ad.add(z, params.e_sentence)
    if batch is not None:
        z = ad.add(Tensor(np.zeros((batch, n + 1, d))), z)
    return z


# ---------------------------------------------------------------- file formats

RAW_MAGIC = b"TNTR"


def save_raw(path, array: np.ndarray) -> None:
    """Raw tensor file: magic, u32 rank, u64 extents, little-endian float64."""
    a = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<I", a.ndim))
        f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        f.write(a.tobytes())


def load_raw(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: not a raw tensor file")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}Q", blob, 8)
    off = 8 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(blob) - off != 8 * count:
        raise FormatError(f"{path}: expected {count} values, file holds {(len(blob) - off) // 8}")
    return np.frombuffer(blob, dtype="<f8", offset=off).reshape(shape).astype(np.float64)


def _ppm_tokens(blob: bytes):
    pos = 0
    while True:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        yield blob[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Binary P6 PPM -> (H, W, 3) float array in [0, 255]."""
    blob = Path(path).read_bytes()
    toks = _ppm_tokens(blob)
    fields = [next(toks) for _ in range(4)]
    if fields[0][0] != b"P6":
        raise FormatError(f"{path}: only binary P6 images are supported")
    width, height, maxval = (int(t) for t, _ in fields[1:])
    off = fields[3][1] + 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height * 3
    if len(blob) - off < count * np.dtype(dtype).itemsize:
        raise FormatError(f"{path}: truncated pixel data for a {width}x{height} image")
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
    return raw.reshape(height, width, 3).astype(np.float64) * (255.0 / maxval)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(img)), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def load_image(path) -> np.ndarray:
    """Read a P6 PPM or a raw tensor file holding an (H, W, 3) image."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == RAW_MAGIC:
        img = load_raw(path)
    elif head[:2] == b"P6":
        img = read_ppm(path)
    else:
        raise FormatError(f"{path}: neither a P6 PPM nor a raw tensor file")
    if img.ndim != 3 or img.shape[-1] != 3:
        raise FormatError(f"{path}: expected an (H, W, 3) image, got {img.shape}")
    return img
