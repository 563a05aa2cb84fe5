"""Full TNT network: tokenizer, stacked TNT / vanilla layers, final norm, head."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .block import TntBlockParams, tnt_forward, vanilla_forward
from .nn import BlockParams, LayerNormParams, LinearParams, named_tensors, param, trunc_normal
from .tokenizer import (
    ConfigError,
    TokenizerParams,
    embed_words,
    grid_shape,
    init_sentences,
    normalize_pixels,
    split_to_words,
)


@dataclass
class TntConfig:
    height: int = 224
    width: int = 224
    patch_size: int = 16
    subpatch_size: int = 4
    depth: int = 12
    inner_dim: int = 24
    inner_heads: int = 4
    outer_dim: int = 384
    outer_heads: int = 6
    mlp_ratio: int = 4
    n_classes: int = 1000
    tnt_block_indices: list[int] | None = None  # 1-based; None means every layer
    drop_path_rate: float = 0.1
    se: bool = False
    pos_enc: dict = field(default_factory=lambda: {"sentence": True, "word": True})
    fusion_ln: bool = True
    class_token_learnable: bool = True
    sentence_init_learnable: bool = False

    def __post_init__(self):
        self.pos_enc = {"sentence": True, "word": True, **dict(self.pos_enc)}
        if self.tnt_block_indices is not None:
            self.tnt_block_indices = sorted({int(i) for i in self.tnt_block_indices})
        self.validate()

    def validate(self) -> None:
        grid_shape(self.height, self.width, self.patch_size, self.subpatch_size)
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")
        for name, dim, heads in (
            ("inner", self.inner_dim, self.inner_heads),
            ("outer", self.outer_dim, self.outer_heads),
        ):
            if heads < 1 or dim % heads:
                raise ConfigError(f"{name} dim {dim} is not divisible by {heads} heads")
        if self.mlp_ratio < 1 or self.n_classes < 1:
            raise ConfigError("mlp_ratio and n_classes must be positive")
        bad = [i for i in self.indices if not 1 <= i <= self.depth]
        if bad:
            raise ConfigError(f"tnt_block_indices {bad} fall outside 1..{self.depth}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("drop_path_rate must lie in [0, 1)")
        unknown = set(self.pos_enc) - {"sentence", "word"}
        if unknown:
            raise ConfigError(f"unknown pos_enc keys {sorted(unknown)}")

    @property
    def indices(self) -> list[int]:
        if self.tnt_block_indices is None:
            return list(range(1, self.depth + 1))
        return list(self.tnt_block_indices)

    @property
    def n(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def m(self) -> int:
        return (self.patch_size // self.subpatch_size) ** 2

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    def is_tnt_layer(self, layer: int) -> bool:
        return layer in self.indices

    def replace(self, **changes) -> TntConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TntConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**data)


PRESETS: dict[str, TntConfig] = {
    "tnt-ti": TntConfig(inner_dim=12, inner_heads=2, outer_dim=192, outer_heads=3),
    "tnt-s": TntConfig(inner_dim=24, inner_heads=4, outer_dim=384, outer_heads=6),
    "tnt-b": TntConfig(inner_dim=40, inner_heads=4, outer_dim=640, outer_heads=10),
    "tnt-micro": TntConfig(
        height=32,
        width=32,
        patch_size=8,
        subpatch_size=4,
        depth=4,
        inner_dim=8,
        inner_heads=2,
        outer_dim=32,
        outer_heads=4,
        n_classes=10,
    ),
}


def preset(name: str, **overrides) -> TntConfig:
    key = name.lower()
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return PRESETS[key].replace(**overrides)


def seed_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose (init, droppath, data, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass
class Model:
    config: TntConfig
    tokenizer: TokenizerParams
    blocks: list  # TntBlockParams or BlockParams per layer
    norm: LayerNormParams
    head: LinearParams

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in named_tensors(self, "") if t.requires_grad]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def build(config: TntConfig, seed: int = 0) -> Model:
    """Initialize a model; the same (config, seed) always gives the same weights."""
    config.validate()
    rng = seed_stream(seed, "init")
    c, d, m, n = config.inner_dim, config.outer_dim, config.m, config.n
    tok = TokenizerParams.init(
        rng,
        config.patch_size,
        config.subpatch_size,
        n,
        c,
        d,
        word_pos=config.pos_enc["word"],
        sentence_pos=config.pos_enc["sentence"],
        class_learnable=config.class_token_learnable,
        sentence_init_learnable=config.sentence_init_learnable,
    )
    blocks: list = []
    for layer in range(1, config.depth + 1):
        if config.is_tnt_layer(layer):
            blocks.append(
                TntBlockParams.init(
                    rng,
                    m,
                    c,
                    d,
                    config.inner_heads,
                    config.outer_heads,
                    config.mlp_ratio,
                    config.drop_path_rate,
                    fusion_ln=config.fusion_ln,
                    se=config.se,
                )
            )
        else:
            blocks.append(
                BlockParams.init(rng, d, config.outer_heads, config.mlp_ratio, config.drop_path_rate)
            )
    head = LinearParams(param(trunc_normal(rng, (d, config.n_classes))), param(np.zeros(config.n_classes)))
    return Model(config, tok, blocks, LayerNormParams.init(d), head)


def _embed(model: Model, img: np.ndarray) -> tuple[Tensor, Tensor]:
    cfg = model.config
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-3:-1] != (cfg.height, cfg.width):
        raise ConfigError(
            f"image is {img.shape[-3]}x{img.shape[-2]} but the model expects {cfg.height}x{cfg.width}"
        )
    words = split_to_words(normalize_pixels(img), cfg.patch_size, cfg.subpatch_size)
    y = embed_words(Tensor(words), model.tokenizer)
    z = init_sentences(model.tokenizer, cfg.n, batch=img.shape[0])
    return y, z


def forward_features(
    model: Model, img: np.ndarray, training: bool = False, rng=None, traces: list | None = None
) -> tuple[Tensor, Tensor, list[Tensor]]:
    """Run the stack on a batch ``(B, H, W, 3)``.

    Returns final word state, final sentence state and the word state after
    every layer (index 0 is the embedded input).  ``traces`` receives one dict
    of attention maps per layer.
    """
    y, z = _embed(model, img)
    word_states = [y]
    for block in model.blocks:
        trace = {} if traces is not None else None
        if isinstance(block, TntBlockParams):
            y, z = tnt_forward(y, z, block, rng, training, trace)
        else:
            z = vanilla_forward(z, block, rng, training, trace)
        word_states.append(y)
        if traces is not None:
            traces.append(trace)
    return y, z, word_states


def forward(model: Model, img: np.ndarray, training: bool = False, rng=None) -> Tensor:
    """Class logits for one ``(H, W, 3)`` image or a ``(B, H, W, 3)`` batch.

    Pixels are in [0, 255]; normalization happens here.
    """
    img = np.asarray(img, dtype=np.float64)
    single = img.ndim == 3
    if single:
        img = img[None]
    if training and model.config.drop_path_rate > 0 and rng is None:
        raise ValueError("training forward with drop path needs an rng")
    _, z, _ = forward_features(model, img, training, rng)
    z = model.norm(z)
    logits = model.head(z[:, 0, :])
    return logits[0] if single else logits


def _bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample (h, w, d) to (out_h, out_w, d), half-pixel centres, edge clamp."""
    h, w = grid.shape[:2]

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = coords(h, out_h)
    c0, c1, fc = coords(w, out_w)
    top = grid[r0][:, c0] * (1 - fc)[None, :, None] + grid[r0][:, c1] * fc[None, :, None]
    bot = grid[r1][:, c0] * (1 - fc)[None, :, None] + grid[r1][:, c1] * fc[None, :, None]
    return top * (1 - fr)[:, None, None] + bot * fr[:, None, None]


def interpolate_position_encodings(model: Model, height: int, width: int) -> Model:
    """Copy of ``model`` for a new input size with resampled sentence encodings."""
    cfg = model.config
    new_cfg = cfg.replace(height=height, width=width)
    (gh, gw), (nh, nw) = cfg.grid, new_cfg.grid
    model = copy.deepcopy(model)
    tok = model.tokenizer

    def resample(rows: np.ndarray) -> np.ndarray:
        if (gh, gw) == (nh, nw):
            return rows.copy()
        out = _bilinear(rows.reshape(gh, gw, -1), nh, nw)
        return out.reshape(nh * nw, -1)

    e_sentence = None
    if tok.e_sentence is not None:
        e = tok.e_sentence.data
        e_sentence = param(np.concatenate([e[:1], resample(e[1:])], axis=0))
    z_sentences = None
    if tok.z_sentences is not None:
        z_sentences = param(resample(tok.z_sentences.data))
    new_tok = dataclasses.replace(tok, e_sentence=e_sentence, z_sentences=z_sentences)
    return Model(new_cfg, new_tok, model.blocks, model.norm, model.head)
