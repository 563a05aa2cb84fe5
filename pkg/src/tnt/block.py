"""One TNT layer and the plain outer-only layer used in mixed models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import BlockParams, LayerNormParams, LinearParams, block_forward


@dataclass
class SeParams:
    """Channel gate: token mean -> FC -> GELU -> FC -> sigmoid, at both levels."""

    sent_fc1: LinearParams  # d -> d/4
    sent_fc2: LinearParams  # d/4 -> d
    word_fc1: LinearParams  # c -> c/4
    word_fc2: LinearParams  # c/4 -> c

    @classmethod
    def init(cls, rng, c: int, d: int, reduction: int = 4) -> SeParams:
        hd, hc = max(1, d // reduction), max(1, c // reduction)
        return cls(
            LinearParams.init(rng, d, hd),
            LinearParams.init(rng, hd, d),
            LinearParams.init(rng, c, hc),
            LinearParams.init(rng, hc, c),
        )


def se_gate(x: Tensor, fc1: LinearParams, fc2: LinearParams) -> Tensor:
    """Scale every token of ``x`` (..., tokens, dim) by a per-dimension gate in (0, 1)."""
    pooled = ad.mean(x, axis=-2, keepdims=True)
    gate = ad.sigmoid(fc2(ad.gelu(fc1(pooled))))
    return ad.multiply(x, gate)


@dataclass
class TntBlockParams:
    inner: BlockParams  # width c, shared by every sentence of the layer
    fusion_ln: LayerNormParams | None  # over m*c
    fusion: LinearParams  # (m*c) -> d
    outer: BlockParams  # width d
    se: SeParams | None = None

    @classmethod
    def init(
        cls,
        rng,
        m: int,
        c: int,
        d: int,
        inner_heads: int,
        outer_heads: int,
        ratio: int = 4,
        drop_path_rate: float = 0.0,
        fusion_ln: bool = True,
        se: bool = False,
    ) -> TntBlockParams:
        inner = BlockParams.init(rng, c, inner_heads, ratio, drop_path_rate)
        fusion = LinearParams.init(rng, m * c, d)
        outer = BlockParams.init(rng, d, outer_heads, ratio, drop_path_rate)
        return cls(
            inner=inner,
            fusion_ln=LayerNormParams.init(m * c) if fusion_ln else None,
            fusion=fusion,
            outer=outer,
            se=SeParams.init(rng, c, d) if se else None,
        )


def fuse_words(y: Tensor, p: TntBlockParams) -> Tensor:
    """FC(Vec(Y^i)) for every sentence: (..., n, m, c) -> (..., n, d)."""
    flat = ad.vectorize(y, 2)
    if p.fusion_ln is not None:
        flat = p.fusion_ln(flat)
    return p.fusion(flat)


def tnt_forward(
    y: Tensor, z: Tensor, p: TntBlockParams, rng=None, training: bool = False, trace: dict | None = None
) -> tuple[Tensor, Tensor]:
    """Inner block over words, fuse words into sentences, outer block over sentences.

    ``y`` is (..., n, m, c) and ``z`` is (..., n + 1, d) with row 0 the class
    token, which receives no fusion term.  When ``trace`` is a dict the inner
    and outer attention maps are stored under ``"inner"`` and ``"outer"``.
    """
    n, m, c = y.shape[-3:]
    if z.shape[-2] != n + 1:
        raise ad.DimensionError(f"tnt block: {n} sentences of words but {z.shape[-2]} sentence rows")
    if c != p.inner.msa.dim or z.shape[-1] != p.outer.msa.dim:
        raise ad.DimensionError(f"tnt block: widths ({c}, {z.shape[-1]}) do not match params")
    inner_maps: list | None = [] if trace is not None else None
    outer_maps: list | None = [] if trace is not None else None

    y = block_forward(y, p.inner, rng, training, inner_maps)
    if p.se is not None:
        y = se_gate(y, p.se.word_fc1, p.se.word_fc2)

    fused = fuse_words(y, p)
    lead = z.shape[:-2]
    zero_cls = Tensor(np.zeros((*lead, 1, z.shape[-1])))
    z = ad.add(z, ad.concat([zero_cls, fused], axis=-2))

    z = block_forward(z, p.outer, rng, training, outer_maps)
    if p.se is not None:
        z = se_gate(z, p.se.sent_fc1, p.se.sent_fc2)
    if trace is not None:
        trace["inner"] = inner_maps[0]
        trace["outer"] = outer_maps[0]
    return y, z


def vanilla_forward(
    z: Tensor, p: BlockParams, rng=None, training: bool = False, trace: dict | None = None
) -> Tensor:
    """A standard transformer layer over the sentence sequence only."""
    maps: list | None = [] if trace is not None else None
    out = block_forward(z, p, rng, training, maps)
    if trace is not None:
        trace["outer"] = maps[0]
    return out
