"""Gradient and oracle-equivalence suite run by ``tnt check``."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .block import TntBlockParams, tnt_forward
from .gradcheck import STEP, check_function, check_parameters
from .model import build, forward, preset, seed_stream
from .nn import BlockParams, MsaParams, block_forward, msa_forward
from .training import smoothed_cross_entropy

TOLERANCE = 1e-4
ORACLE_TOL = 1e-10


def naive_attention(x: np.ndarray, p: MsaParams) -> tuple[np.ndarray, np.ndarray]:
    """Multi-head attention one scalar at a time, for cross-checking."""
    n, dim = x.shape
    h = p.heads
    dk = dim // h

    def proj(lin, row):
        w, b = lin.weight.data, lin.bias.data
        return [sum(row[i] * w[i, j] for i in range(dim)) + b[j] for j in range(w.shape[1])]

    qs = [proj(p.q, x[t]) for t in range(n)]
    ks = [proj(p.k, x[t]) for t in range(n)]
    vs = [proj(p.v, x[t]) for t in range(n)]
    maps = np.zeros((h, n, n))
    concat = np.zeros((n, dim))
    for head in range(h):
        lo = head * dk
        for i in range(n):
            scores = [
                sum(qs[i][lo + a] * ks[j][lo + a] for a in range(dk)) / math.sqrt(dk) for j in range(n)
            ]
            top = max(scores)
            ex = [math.exp(s - top) for s in scores]
            tot = sum(ex)
            for j in range(n):
                maps[head, i, j] = ex[j] / tot
            for a in range(dk):
                concat[i, lo + a] = sum(maps[head, i, j] * vs[j][lo + a] for j in range(n))
    out = np.array([proj(p.o, concat[t]) for t in range(n)])
    return out, maps


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


@dataclass
class CheckReport:
    eps: float
    tolerance: float
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def render(self) -> str:
        lines = [
            f"gradient check: central differences, step {self.eps:g}, "
            f"relative tolerance {self.tolerance:g}; attention oracle tolerance {ORACLE_TOL:g}"
        ]
        for r in self.results:
            lines.append(f"  [{'PASS' if r.passed else 'FAIL'}] {r.name:<40s} err={r.error:.3e} tol={r.tolerance:g}")
        n_fail = len(self.failures())
        lines.append(
            f"{len(self.results) - n_fail}/{len(self.results)} passed in {self.seconds:.1f}s"
            + ("" if not n_fail else "; failing: " + ", ".join(r.name for r in self.failures()))
        )
        return "\n".join(lines)


def _op_cases(rng):
    u = lambda *s: rng.uniform(-1.0, 1.0, size=s)  # noqa: E731
    return {
        "matmul": (ad.matmul, [u(5, 7), u(7, 3)]),
        "matmul[batched]": (ad.matmul, [u(2, 3, 4, 5), u(3, 5, 2)]),
        "linear": (ad.linear, [u(2, 3, 4), u(4, 5), u(5)]),
        "softmax": (lambda x: ad.softmax(x, axis=-1), [u(4, 6)]),
        "log_softmax": (lambda x: ad.log_softmax(x, axis=-1), [u(3, 5)]),
        "layer_norm": (lambda x, g, b: ad.layer_norm(x, g, b, 1e-5), [u(3, 8), u(8), u(8)]),
        "gelu": (ad.gelu, [3 * u(4, 5)]),
        "sigmoid": (ad.sigmoid, [3 * u(4, 5)]),
        "add": (ad.add, [u(3, 4), u(4)]),
        "multiply": (ad.multiply, [u(3, 4), u(3, 1)]),
        "scale": (lambda x: ad.scale(x, -2.5), [u(3, 4)]),
        "reshape": (lambda x: ad.reshape(x, (6, 2)), [u(3, 4)]),
        "transpose": (lambda x: ad.transpose(x, (2, 0, 1)), [u(2, 3, 4)]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [u(2, 3), u(2, 2)]),
        "slice": (lambda x: x[1:, ::2], [u(3, 4)]),
        "sum": (lambda x: ad.sum_(x, axis=0), [u(3, 4)]),
        "mean": (lambda x: ad.mean(x, axis=-1, keepdims=True), [u(3, 4)]),
        "vectorize": (lambda x: ad.vectorize(x, 3), [u(2, 4, 4, 3)]),
    }


def check_ops(eps: float = STEP, tol: float = TOLERANCE, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, inputs) in _op_cases(rng).items():
        out.append(CheckResult(f"op:{name}", max(check_function(fn, inputs, eps, seed)), tol))
    return out


def attention_oracle_configs():
    for heads in (1, 2):
        for dim in range(heads, 9, heads):
            for n_seq in range(1, 7):
                yield n_seq, dim, heads


def check_attention_oracle(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n_seq, dim, heads in attention_oracle_configs():
        p = MsaParams.init(rng, dim, heads)
        for lin in (p.q, p.k, p.v, p.o):
            lin.weight.data = rng.normal(0, 0.5, lin.weight.shape)
            lin.bias.data = rng.normal(0, 0.5, lin.bias.shape)
        x = rng.normal(size=(n_seq, dim))
        with ad.no_grad():
            out, maps = msa_forward(Tensor(x), p)
        ref_out, ref_maps = naive_attention(x, p)
        worst = max(worst, float(np.abs(out.data - ref_out).max()), float(np.abs(maps - ref_maps).max()))
    return CheckResult("oracle:msa_vs_triple_loop", worst, ORACLE_TOL)


def _micro_config(**overrides):
    return preset("tnt-micro", **overrides)


def check_block(eps: float = STEP, tol: float = TOLERANCE, seed: int = 0) -> list[CheckResult]:
    rng = seed_stream(seed, "check/block")
    p = BlockParams.init(rng, 8, 2, 4)
    _randomize(p, rng)
    x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, size=(5, 8)))

    def loss():
        return ad.sum_(ad.multiply(block_forward(x, p), w))

    from .nn import named_tensors

    named = [("input", x)] + [(k, t) for k, t in named_tensors(p, "block")]
    errs = check_parameters(loss, named, eps, coords=4, seed=seed)
    return [CheckResult("grad:block", max(errs.values()), tol)]


def _randomize(params, rng, scale: float = 0.3) -> None:
    """Push weights away from init so every path carries signal."""
    from .nn import named_tensors

    for _, t in named_tensors(params):
        if t.requires_grad:
            t.data = t.data + rng.normal(0, scale, t.shape)


def check_tnt_block(eps: float = STEP, tol: float = TOLERANCE, seed: int = 0) -> list[CheckResult]:
    rng = seed_stream(seed, "check/tnt_block")
    n, m, c, d = 3, 4, 8, 16
    p = TntBlockParams.init(rng, m, c, d, 2, 4, se=True)
    _randomize(p, rng)
    y = Tensor(rng.normal(size=(n, m, c)), requires_grad=True)
    z = Tensor(rng.normal(size=(n + 1, d)), requires_grad=True)
    wy = Tensor(rng.uniform(-1, 1, (n, m, c)))
    wz = Tensor(rng.uniform(-1, 1, (n + 1, d)))

    def loss():
        y2, z2 = tnt_forward(y, z, p)
        return ad.add(ad.sum_(ad.multiply(y2, wy)), ad.sum_(ad.multiply(z2, wz)))

    from .nn import named_tensors

    named = [("Y", y), ("Z", z)] + list(named_tensors(p, "tnt"))
    errs = check_parameters(loss, named, eps, coords=4, seed=seed)
    groups: dict[str, float] = {}
    for name, e in errs.items():
        key = name.split(".")[1] if "." in name else name
        groups[key] = max(groups.get(key, 0.0), e)
    return [CheckResult(f"grad:tnt_block.{k}", e, tol) for k, e in groups.items()]


def model_gradient_errors(model, eps: float = STEP, coords: int = 3, seed: int = 0) -> dict[str, float]:
    """Per-parameter-tensor error of the full network on one image."""
    rng = seed_stream(seed, "check/model")
    cfg = model.config
    img = rng.uniform(0, 255, size=(cfg.height, cfg.width, 3))
    label = int(rng.integers(cfg.n_classes))

    def loss():
        return smoothed_cross_entropy(forward(model, img), label, 0.1)

    return check_parameters(loss, model.named_parameters(), eps, coords=coords, seed=seed)


def check_model(eps: float = STEP, tol: float = TOLERANCE, seed: int = 0) -> list[CheckResult]:
    model = build(_micro_config(), seed)
    noise = seed_stream(seed, "check/perturb")
    for _, t in model.named_parameters():
        # start from a generic point rather than the near-symmetric init
        t.data = t.data + noise.normal(0, 0.05, t.shape)
    errs = model_gradient_errors(model, eps, seed=seed)
    groups: dict[str, float] = {}
    for name, e in errs.items():
        parts = name.split(".")
        key = ".".join(parts[:3]) if parts[0] == "blocks" else parts[0] + "." + parts[1]
        groups[key] = max(groups.get(key, 0.0), e)
    return [CheckResult(f"grad:micro.{k}", e, tol) for k, e in groups.items()]


def run_checks(eps: float = STEP, tol: float = TOLERANCE, seed: int = 0) -> CheckReport:
    t0 = time.perf_counter()
    report = CheckReport(eps=eps, tolerance=tol)
    report.results += check_ops(eps, tol, seed)
    report.results.append(check_attention_oracle(seed))
    report.results += check_block(eps, tol, seed)
    report.results += check_tnt_block(eps, tol, seed)
    report.results += check_model(eps, tol, seed)
    report.seconds = time.perf_counter() - t0
    return report
