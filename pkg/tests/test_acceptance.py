"""Acceptance criteria, one test and one printed PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -s`` (or ``python tests/test_acceptance.py``).
"""
import time

import numpy as np
import pytest

from tnt import autodiff as ad
from tnt import checkpoint
from tnt.autodiff import Tensor
from tnt.checks import check_attention_oracle, run_checks
from tnt.complexity import (
    count_parameters,
    flops_standard_block,
    flops_tnt_block,
    model_report,
    params_standard_block,
    params_tnt_block,
    reported_ratio,
)
from tnt.model import build, forward, preset
from tnt.nn import BlockParams, block_forward, msa_forward, named_tensors
from tnt.tokenizer import assemble_words, split_to_words
from tnt.training import Schedule, evaluate, make_subpatch_task, train


def report(number: int, title: str, ok: bool, detail: str, seconds: float) -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail} ({seconds:.3g}s)")
    assert ok, detail


def within(value: float, target: float, rel: float) -> bool:
    return abs(value - target) / target <= rel


def test_criterion_1_block_complexity_example():
    t0 = time.perf_counter()
    f_std = flops_standard_block(196, 384)
    f_tnt = flops_tnt_block(196, 16, 24, 384)
    f_ratio = reported_ratio(f_tnt / f_std)
    p_ratio = reported_ratio(params_tnt_block(16, 24, 384) / params_standard_block(384))
    seconds = time.perf_counter() - t0
    ok = f_std == 376_320_000 and f_tnt == 429_305_856 and f_ratio == 1.14 and p_ratio == 1.08 and seconds < 0.1
    report(1, "block complexity", ok,
           f"FLOPs standard {f_std:,}, TNT {f_tnt:,}; ratios {f_ratio:.2f}x FLOPs, {p_ratio:.2f}x params", seconds)


def test_criterion_2_variant_table():
    t0 = time.perf_counter()
    targets = {"tnt-ti": (6.1, 1.4), "tnt-s": (23.8, 5.2), "tnt-b": (65.6, 14.1)}
    parts, ok = [], True
    for name, (params_m, flops_b) in targets.items():
        cfg = preset(name)
        params = count_parameters(build(cfg, 0)) / 1e6
        flops = model_report(cfg).formula_flops / 1e9
        ok &= within(params, params_m, 0.02) and within(flops, flops_b, 0.05)
        parts.append(f"{name} {params:.2f}M/{flops:.2f}B")
    report(2, "variant sizes", ok, ", ".join(parts), time.perf_counter() - t0)


def test_criterion_3_mixed_models():
    t0 = time.perf_counter()
    rows = [([1, 4, 8, 12], 4.8), ([1, 6, 12], 4.7), ([1, 6], 4.7), ([1], 4.6)]
    flops = [model_report(preset("tnt-s", tnt_block_indices=idx)).formula_flops / 1e9 for idx, _ in rows]
    ok = all(within(f, target, 0.05) for f, (_, target) in zip(flops, rows))
    ok &= all(a >= b for a, b in zip(flops, flops[1:]))
    detail = ", ".join(f"{idx} {f:.3f}B" for (idx, _), f in zip(rows, flops))
    report(3, "mixed-model FLOPs", ok, detail + ", non-increasing", time.perf_counter() - t0)


def test_criterion_4_gradient_checks():
    suite = run_checks(eps=1e-5, tol=1e-4)
    micro = [r for r in suite.results if r.name.startswith("grad:micro.")]
    worst = max(micro, key=lambda r: r.error)
    ok = suite.passed and len(micro) > 0 and suite.seconds < 60
    detail = (f"{len(suite.results) - len(suite.failures())}/{len(suite.results)} checks pass, "
              f"{len(micro)} TNT-micro parameter groups, worst {worst.name} {worst.error:.2e}")
    if suite.failures():
        detail += "; failing " + ", ".join(r.name for r in suite.failures())
    report(4, "finite-difference gradients", ok, detail, suite.seconds)


def test_criterion_5_attention_oracle():
    t0 = time.perf_counter()
    result = check_attention_oracle()
    report(5, "attention oracle", result.error < 1e-10,
           f"max deviation {result.error:.1e} over n_seq<=6, dim<=8, h in {{1,2}}", time.perf_counter() - t0)


def test_criterion_6_invariants(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    checks = {}

    x = rng.normal(0, 50, size=(20, 9))
    checks["softmax rows"] = np.abs(ad.softmax(Tensor(x)).data.sum(-1) - 1).max() < 1e-12

    block = BlockParams.init(rng, 8, 2, 4, 0.0)
    for _, t in named_tensors(block):
        t.data = t.data + rng.normal(0, 0.2, t.shape)
    _, maps = msa_forward(Tensor(rng.normal(size=(3, 6, 8))), block.msa)
    checks["attention rows"] = bool(np.all(maps >= 0)) and np.abs(maps.sum(-1) - 1).max() < 1e-12

    ln = ad.layer_norm(Tensor(rng.normal(4, 3, (10, 32))), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    checks["LN moments"] = np.abs(ln.mean(-1)).max() < 1e-12 and np.abs(ln.var(-1) - 1).max() < 1e-3

    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 8))
        tokens = rng.normal(size=(n, 8))
        perm = rng.permutation(n)
        worst = max(worst, np.abs(block_forward(Tensor(tokens[perm]), block).data
                                  - block_forward(Tensor(tokens), block).data[perm]).max())
    checks["permutation equivariance"] = worst < 1e-10

    img = rng.uniform(0, 255, (224, 224, 3))
    checks["lossless partition"] = np.array_equal(assemble_words(split_to_words(img, 16, 4), 224, 224, 16, 4), img)

    model = build(preset("tnt-micro"), 0)
    sample = rng.uniform(0, 255, (32, 32, 3))
    checkpoint.save(model, tmp_path / "a.ckpt")
    loaded = checkpoint.load(tmp_path / "a.ckpt")
    checkpoint.save(loaded, tmp_path / "b.ckpt")
    checks["checkpoint round trip"] = (
        (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        and np.array_equal(forward(model, sample).data, forward(loaded, sample).data)
    )
    failed = [k for k, v in checks.items() if not v]
    detail = f"{len(checks) - len(failed)}/{len(checks)} green" + (f"; failing {failed}" if failed else "")
    report(6, "invariants", not failed, detail, time.perf_counter() - t0)


def test_criterion_7_toy_learning(micro_run):
    # the TNT arm is the `tnt train` run shared with the CLI tests
    summary = micro_run["summary"]
    t0 = time.perf_counter()
    schedule = Schedule()
    train_set = make_subpatch_task(0, summary["n_train"], "train")
    test_set = make_subpatch_task(0, summary["n_test"], "test")
    control = build(preset("tnt-micro", tnt_block_indices=[], n_classes=2), 0)
    control, _, _ = train(control, train_set, schedule, seed=0)
    control_acc = evaluate(control, test_set.images, test_set.labels)
    control_seconds = time.perf_counter() - t0
    total = micro_run["seconds"] + control_seconds
    ok = (summary["steps"] == 2000 and summary["train_acc"] >= 0.95 and summary["test_acc"] >= 0.85
          and control_acc <= 0.70 and total < 300)
    detail = (f"TNT-micro train {summary['train_acc']:.3f}, held-out {summary['test_acc']:.3f} "
              f"({micro_run['seconds']:.0f}s); vanilla-only control held-out {control_acc:.3f} "
              f"({control_seconds:.0f}s); batch {schedule.batch_size}, lr {schedule.lr}, wd {schedule.weight_decay}")
    report(7, "toy learning", ok, detail, total)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-q"]))
