"""Transformer building blocks: multi-head self-attention, MLP, pre-norm block.

All forwards accept any number of leading batch axes in front of the
``(n_seq, dim)`` token matrix.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN_EPS = 1e-5
INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) redrawn until every value lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass
class LinearParams:
    weight: Tensor  # (in, out)
    bias: Tensor

    @classmethod
    def init(cls, rng, d_in: int, d_out: int) -> LinearParams:
        return cls(param(trunc_normal(rng, (d_in, d_out))), param(np.zeros(d_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, dim: int) -> LayerNormParams:
        return cls(param(np.ones(dim)), param(np.zeros(dim)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, LN_EPS)


@dataclass
class MsaParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams
    heads: int

    def __post_init__(self):
        dim = self.q.weight.shape[0]
        if self.heads < 1 or dim % self.heads:
            raise ValueError(f"dim {dim} is not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.q.weight.shape[0]

    @classmethod
    def init(cls, rng, dim: int, heads: int) -> MsaParams:
        return cls(*(LinearParams.init(rng, dim, dim) for _ in range(4)), heads=heads)


@dataclass
class MlpParams:
    fc1: LinearParams
    fc2: LinearParams

    @property
    def ratio(self) -> int:
        return self.fc1.weight.shape[1] // self.fc1.weight.shape[0]

    @classmethod
    def init(cls, rng, dim: int, ratio: int) -> MlpParams:
        return cls(LinearParams.init(rng, dim, ratio * dim), LinearParams.init(rng, ratio * dim, dim))


@dataclass
class BlockParams:
    ln1: LayerNormParams
    msa: MsaParams
    ln2: LayerNormParams
    mlp: MlpParams
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")
        dim = self.msa.dim
        if self.ln1.gamma.shape != (dim,) or self.ln2.gamma.shape != (dim,):
            raise ValueError("layer norm width does not match attention width")
        if self.mlp.fc1.weight.shape[0] != dim or self.mlp.fc2.weight.shape[1] != dim:
            raise ValueError("mlp width does not match attention width")

    @classmethod
    def init(cls, rng, dim: int, heads: int, ratio: int = 4, drop_path_rate: float = 0.0):
        return cls(
            ln1=LayerNormParams.init(dim),
            msa=MsaParams.init(rng, dim, heads),
            ln2=LayerNormParams.init(dim),
            mlp=MlpParams.init(rng, dim, ratio),
            drop_path_rate=drop_path_rate,
        )


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses, lists and dicts yielding ``(dotted_name, tensor)``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for k, item in obj.items():
            yield from named_tensors(item, f"{prefix}.{k}" if prefix else str(k))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, dim = x.shape
    x = ad.reshape(x, (*lead, n, heads, dim // heads))
    k = len(lead)
    return ad.transpose(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    k = len(lead)
    x = ad.transpose(x, (*range(k), k + 1, k, k + 2))
    return ad.reshape(x, (*lead, n, h * dk))


def msa_forward(x: Tensor, p: MsaParams) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product self-attention.

    Returns the projected output and the attention maps with shape
    ``(..., heads, n_seq, n_seq)`` as a plain array.
    """
    if x.shape[-1] != p.dim:
        raise ad.DimensionError(f"msa: input width {x.shape[-1]} != params width {p.dim}")
    dk = p.dim // p.heads
    q = _split_heads(p.q(x), p.heads)
    k = _split_heads(p.k(x), p.heads)
    v = _split_heads(p.v(x), p.heads)
    scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / np.sqrt(dk))
    attn = ad.softmax(scores, axis=-1)
    out = p.o(_merge_heads(ad.matmul(attn, v)))
    return out, attn.data


def mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    return p.fc2(ad.gelu(p.fc1(x)))


def drop_path(branch: Tensor, rate: float, rng, training: bool) -> Tensor:
    """Zero the branch per sample with probability ``rate``; rescale survivors.

    The sample axis is the first axis when the branch has more than the
    ``(n_seq, dim)`` token axes, otherwise the whole branch is one sample.
    """
    if not training or rate == 0.0:
        return branch
    keep = 1.0 - rate
    shape = (branch.shape[0],) + (1,) * (branch.ndim - 1) if branch.ndim > 2 else (1, 1)
    mask = (np.asarray(rng.random(shape)) < keep).astype(ad.DTYPE) / keep
    return ad.multiply(branch, Tensor(mask))


def block_forward(
    x: Tensor, p: BlockParams, rng=None, training: bool = False, attn_out: list | None = None
) -> Tensor:
    """Pre-norm residual block: x + MSA(LN(x)), then + MLP(LN(.))."""
    a, maps = msa_forward(p.ln1(x), p.msa)
    if attn_out is not None:
        attn_out.append(maps)
    x = ad.add(x, drop_path(a, p.drop_path_rate, rng, training))
    m = mlp_forward(p.ln2(x), p.mlp)
    return ad.add(x, drop_path(m, p.drop_path_rate, rng, training))
