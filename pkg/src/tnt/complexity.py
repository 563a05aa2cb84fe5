"""FLOPs and parameter accounting for standard and TNT blocks.

Two conventions are reported side by side:

* ``formula``: the closed forms, weights only, one FLOP per multiply-add,
  n tokens in the outer sequence.  Biases, norms, stem and head are ignored.
* ``exhaustive``: every learnable tensor of the built network is counted, and
  every matrix product (projections, attention products, MLP, fusion, stem,
  head, SE) is counted with the true token counts (n + 1 outer tokens).
  Elementwise work (norms, softmax, GELU, bias adds) is still left out.

Everything here is integer arithmetic.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .model import TntConfig


def _positive(**values: int) -> None:
    for name, v in values.items():
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")


def flops_standard_block(n: int, d: int, r: int = 4) -> int:
    """2nd(6d + n) for r = 4; in general 2nd((2 + r)d + n)."""
    _positive(n=n, d=d, r=r)
    return 2 * n * d * ((2 + r) * d + n)


def flops_standard_block_general(n: int, d: int, d_k: int, d_v: int, r: int) -> int:
    """Unsimplified form: attention 2nd(dk+dv) + n^2(dk+dv), MLP 2nd*d*r."""
    _positive(n=n, d=d, d_k=d_k, d_v=d_v, r=r)
    return 2 * n * d * (d_k + d_v) + n * n * (d_k + d_v) + 2 * n * d * d * r


def params_standard_block(d: int, r: int = 4) -> int:
    """12dd for r = 4 (four d x d projections plus a 2rd^2 MLP)."""
    _positive(d=d, r=r)
    return (4 + 2 * r) * d * d


def tnt_block_terms(n: int, m: int, c: int, d: int, r: int = 4) -> dict[str, int]:
    _positive(n=n, m=m, c=c, d=d, r=r)
    return {
        "inner": n * flops_standard_block(m, c, r),
        "fusion": n * m * c * d,
        "outer": flops_standard_block(n, d, r),
    }


def flops_tnt_block(n: int, m: int, c: int, d: int, r: int = 4) -> int:
    """2nmc(6c + m) + nmcd + 2nd(6d + n)."""
    return sum(tnt_block_terms(n, m, c, d, r).values())


def params_tnt_block(m: int, c: int, d: int, r: int = 4) -> int:
    """12cc + mcd + 12dd."""
    _positive(m=m, c=c, d=d, r=r)
    return params_standard_block(c, r) + m * c * d + params_standard_block(d, r)


def reported_ratio(x: float) -> float:
    """Two-decimal ratio as quoted in tables: truncated, so 1.0872 reads 1.08."""
    return math.floor(x * 100 + 1e-9) / 100


# ---------------------------------------------------------------- exhaustive


def _linear_params(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def _block_params(dim: int, r: int) -> int:
    return 2 * dim + 4 * _linear_params(dim, dim) + 2 * dim + _linear_params(dim, r * dim) + _linear_params(r * dim, dim)


def _block_macs(tokens: int, dim: int, r: int) -> int:
    return 4 * tokens * dim * dim + 2 * tokens * tokens * dim + 2 * tokens * dim * r * dim


def _se_params(c: int, d: int) -> int:
    hd, hc = max(1, d // 4), max(1, c // 4)
    return _linear_params(d, hd) + _linear_params(hd, d) + _linear_params(c, hc) + _linear_params(hc, c)


def _se_macs(n: int, c: int, d: int) -> int:
    hd, hc = max(1, d // 4), max(1, c // 4)
    return 2 * d * hd + n * 2 * c * hc


def exhaustive_layer(config: TntConfig, layer: int) -> tuple[int, int]:
    """(MACs, params) of one layer as built, counted tensor by tensor."""
    n, m, c, d, r = config.n, config.m, config.inner_dim, config.outer_dim, config.mlp_ratio
    outer_p = _block_params(d, r)
    outer_f = _block_macs(n + 1, d, r)
    if not config.is_tnt_layer(layer):
        return outer_f, outer_p
    params = _block_params(c, r) + _linear_params(m * c, d) + outer_p
    flops = n * _block_macs(m, c, r) + n * m * c * d + outer_f
    if config.fusion_ln:
        params += 2 * m * c
    if config.se:
        params += _se_params(c, d)
        flops += _se_macs(n, c, d)
    return flops, params


def exhaustive_extras(config: TntConfig) -> dict[str, tuple[int, int]]:
    """(MACs, params) of everything outside the layers."""
    n, m, c, d = config.n, config.m, config.inner_dim, config.outer_dim
    s = config.subpatch_size
    wd = 3 * s * s
    enc = 0
    if config.pos_enc["word"]:
        enc += m * c
    if config.pos_enc["sentence"]:
        enc += (n + 1) * d
    tokens = d if config.class_token_learnable else 0
    if config.sentence_init_learnable:
        tokens += n * d
    return {
        "stem": (n * m * wd * c, _linear_params(wd, c)),
        "encodings": (0, enc),
        "tokens": (0, tokens),
        "final_norm": (0, 2 * d),
        "head": (d * config.n_classes, _linear_params(d, config.n_classes)),
    }


def count_parameters(model) -> int:
    """Walk every registered learnable tensor of a built model."""
    return sum(t.size for _, t in model.named_parameters())


def count_weight_parameters(params_obj) -> int:
    """Sum of linear weight matrices only (no biases, norms or encodings)."""
    from .nn import named_tensors

    return sum(t.size for name, t in named_tensors(params_obj) if name.endswith("weight"))


# ---------------------------------------------------------------- report


@dataclass
class LayerRow:
    layer: int
    kind: str
    formula_flops: int
    formula_params: int
    exhaustive_flops: int
    exhaustive_params: int


@dataclass
class ComplexityReport:
    config: dict
    layers: list[LayerRow] = field(default_factory=list)
    extras: dict[str, tuple[int, int]] = field(default_factory=dict)
    formula_flops: int = 0
    formula_params: int = 0
    exhaustive_flops: int = 0
    exhaustive_params: int = 0
    block_flops_ratio: float = 0.0
    block_params_ratio: float = 0.0
    model_flops_ratio: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def render(self) -> str:
        cfg = self.config
        head = (
            f"TNT {cfg['height']}x{cfg['width']}  p={cfg['patch_size']} s={cfg['subpatch_size']}  "
            f"L={cfg['depth']} c={cfg['inner_dim']} d={cfg['outer_dim']}  "
            f"TNT layers={_fmt_indices(cfg)}"
        )
        cols = ("layer", "kind", "formula FLOPs", "formula params", "exh. FLOPs", "exh. params")
        rows = [
            (str(r.layer), r.kind, f"{r.formula_flops:,}", f"{r.formula_params:,}",
             f"{r.exhaustive_flops:,}", f"{r.exhaustive_params:,}")
            for r in self.layers
        ]
        for name, (f, p) in self.extras.items():
            rows.append(("-", name, "", "", f"{f:,}", f"{p:,}"))
        rows.append(("", "total", f"{self.formula_flops:,}", f"{self.formula_params:,}",
                     f"{self.exhaustive_flops:,}", f"{self.exhaustive_params:,}"))
        widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
        line = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
        out = [head, line, "-" * len(line)]
        out += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
        out.append("")
        out.append(
            f"params {self.exhaustive_params / 1e6:.1f}M (formula {self.formula_params / 1e6:.1f}M)   "
            f"FLOPs {self.formula_flops / 1e9:.2f}B (exhaustive {self.exhaustive_flops / 1e9:.2f}B)"
        )
        out.append(
            f"TNT/standard block ratio: FLOPs {reported_ratio(self.block_flops_ratio):.2f}x, "
            f"params {reported_ratio(self.block_params_ratio):.2f}x; model FLOPs vs all-standard "
            f"{reported_ratio(self.model_flops_ratio):.2f}x"
        )
        return "\n".join(out)


def _fmt_indices(cfg: dict) -> str:
    idx = cfg["tnt_block_indices"]
    if idx is None:
        return "all"
    return "[" + ", ".join(str(i) for i in idx) + "]"


def model_report(config: TntConfig) -> ComplexityReport:
    n, m, c, d, r = config.n, config.m, config.inner_dim, config.outer_dim, config.mlp_ratio
    rep = ComplexityReport(config=config.to_dict())
    for layer in range(1, config.depth + 1):
        ef, ep = exhaustive_layer(config, layer)
        if config.is_tnt_layer(layer):
            row = LayerRow(layer, "tnt", flops_tnt_block(n, m, c, d, r), params_tnt_block(m, c, d, r), ef, ep)
        else:
            row = LayerRow(layer, "standard", flops_standard_block(n, d, r), params_standard_block(d, r), ef, ep)
        rep.layers.append(row)
    rep.extras = exhaustive_extras(config)
    rep.formula_flops = sum(x.formula_flops for x in rep.layers)
    rep.formula_params = sum(x.formula_params for x in rep.layers)
    rep.exhaustive_flops = sum(x.exhaustive_flops for x in rep.layers) + sum(f for f, _ in rep.extras.values())
    rep.exhaustive_params = sum(x.exhaustive_params for x in rep.layers) + sum(p for _, p in rep.extras.values())
    rep.block_flops_ratio = flops_tnt_block(n, m, c, d, r) / flops_standard_block(n, d, r)
    rep.block_params_ratio = params_tnt_block(m, c, d, r) / params_standard_block(d, r)
    rep.model_flops_ratio = rep.formula_flops / (config.depth * flops_standard_block(n, d, r))
    return rep
