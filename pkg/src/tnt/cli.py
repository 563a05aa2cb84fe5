"""``tnt`` command line: describe, check, train, eval, export.

Exit codes: 0 success, 1 usage error, 2 numerical-check failure, 3 I/O error.
Configuration precedence is CLI flags > ``--config`` JSON file > preset.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .model import TntConfig, build, preset, seed_stream
from .tokenizer import ConfigError, FormatError

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3
DEFAULT_SEED = 0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which is reserved for check failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _threads():
    """Honour TNT_THREADS by capping the BLAS pool."""
    value = os.environ.get("TNT_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        limit = int(value)
    except ValueError:
        raise UsageError(f"TNT_THREADS must be an integer, got {value!r}") from None
    return threadpool_limits(limits=max(1, limit))


# ---------------------------------------------------------------- config


def parse_value(text: str):
    """JSON when it parses (numbers, booleans, lists, null), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_indices(text: str) -> list[int] | None:
    t = text.strip().lower()
    if t in ("all", ""):
        return None if t == "all" else []
    if t in ("none", "[]"):
        return []
    try:
        return [int(v) for v in t.strip("[]").split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--indices expects a comma list like 1,6,12 (or all / none), got {text!r}") from None


def resolve_config(args) -> TntConfig:
    base = preset(args.preset).to_dict()
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: not valid JSON ({exc})") from None
        if not isinstance(file_values, dict):
            raise UsageError(f"{args.config}: expected a JSON object of config fields")
        base.update(file_values)
    known = {f.name for f in dataclasses.fields(TntConfig)}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key = key.strip()
        if key.startswith("pos_enc."):
            base["pos_enc"] = {**base["pos_enc"], key.split(".", 1)[1]: parse_value(value)}
            continue
        if key not in known:
            raise UsageError(f"--set {key}: not a config field (known: {', '.join(sorted(known))})")
        base[key] = parse_value(value)
    if getattr(args, "indices", None) is not None:
        base["tnt_block_indices"] = parse_indices(args.indices)
    return TntConfig.from_dict(base)


def _add_config_args(p: argparse.ArgumentParser, default_preset: str) -> None:
    p.add_argument("--preset", default=default_preset, help="tnt-ti, tnt-s, tnt-b or tnt-micro")
    p.add_argument("--config", help="JSON file of config fields, applied over the preset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--indices", help="1-based TNT layers, e.g. 1,6,12; 'none' for a vanilla-only stack")


# ---------------------------------------------------------------- commands


def cmd_describe(args) -> int:
    from .complexity import model_report

    report = model_report(resolve_config(args))
    print(report.to_json() if args.json else report.render())
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_checks

    report = run_checks(eps=args.eps, tol=args.tol, seed=args.seed)
    print(report.render())
    return EXIT_OK if report.passed else EXIT_CHECK


def _task(name: str, seed: int, n: int, split: str):
    from .training import make_subpatch_task

    if name != "subpatch":
        raise UsageError(f"unknown task {name!r}; only 'subpatch' is available")
    return make_subpatch_task(seed, n, split)


def cmd_train(args) -> int:
    from . import checkpoint
    from .training import Schedule, evaluate, train

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set = _task(args.task, args.seed, args.n_train, "train")
    test_set = _task(args.task, args.seed, args.n_test, "test")
    config = resolve_config(args).replace(n_classes=train_set.n_classes)
    model = build(config, args.seed)
    schedule = Schedule(steps=args.steps, batch_size=args.batch_size, lr=args.lr, weight_decay=args.weight_decay)

    with open(out / "metrics.jsonl", "w") as log_file:
        def on_record(rec):
            log_file.write(json.dumps(rec) + "\n")
            if args.log_every and (rec["step"] + 1) % args.log_every == 0:
                print(f"step {rec['step'] + 1:5d}  lr {rec['lr']:.2e}  loss {rec['loss']:.4f}  acc {rec['acc']:.3f}",
                      flush=True)

        model, log, state = train(model, train_set, schedule, seed=args.seed, on_record=on_record)

    train_acc = evaluate(model, train_set.images, train_set.labels)
    test_acc = evaluate(model, test_set.images, test_set.labels)
    meta = {
        "task": args.task, "seed": args.seed, "n_train": args.n_train, "n_test": args.n_test,
        "steps": args.steps, "train_acc": train_acc, "test_acc": test_acc,
    }
    checkpoint.save(model, out / "final.ckpt", meta=meta, optimizer=state)
    (out / "summary.json").write_text(json.dumps(meta, indent=2) + "\n")
    if args.figures:
        from .plotting import training_curves

        training_curves(log, out / "training.png", title=f"{args.preset}, seed {args.seed}")
    print(f"train top-1 {train_acc:.4f}  held-out top-1 {test_acc:.4f}")
    print(f"wrote {out / 'metrics.jsonl'} and {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .training import evaluate

    ck = load_checkpoint(args.ckpt)
    meta = ck.meta
    if "task" not in meta:
        raise UsageError(f"{args.ckpt} records no task; it was not written by 'tnt train'")
    seed = meta["seed"] if args.seed is None else args.seed
    n = meta["n_train"] if args.split == "train" else meta["n_test"]
    data = _task(meta["task"], seed, n, args.split)
    acc = evaluate(ck.model, data.images, data.labels)
    print(f"top-1 ({args.split}, n={n}): {acc:.4f}")
    return EXIT_OK


def _export_image(args, model, meta: dict) -> np.ndarray:
    from .tokenizer import load_image

    if args.image:
        return load_image(args.image)
    if "task" in meta:
        data = _task(meta["task"], meta["seed"], 2 * (args.index // 2 + 1), "test")
        return data.images[args.index]
    cfg = model.config
    return seed_stream(args.seed, "data/export").uniform(0, 255, size=(cfg.height, cfg.width, 3))


def cmd_export(args) -> int:
    from . import introspection as ix

    if args.ckpt:
        from .checkpoint import load_checkpoint

        ck = load_checkpoint(args.ckpt)
        model, meta = ck.model, ck.meta
    else:
        model, meta = build(resolve_config(args), args.seed), {}
    img = _export_image(args, model, meta)
    head = "mean" if args.head == "mean" else int(args.head)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    figure = out.with_suffix(".png") if args.figure else None

    if args.kind == "inner-attn":
        dump = ix.export_inner_attention(model, img, args.layer, args.sentence, head, out)
        if figure:
            from .plotting import attention_heatmap

            attention_heatmap(dump.matrix, figure, f"inner attention, layer {args.layer}, sentence {args.sentence}")
    elif args.kind == "outer-attn":
        dump = ix.export_outer_attention(model, img, args.layer, head, out)
        if figure:
            from .plotting import attention_heatmap

            attention_heatmap(dump.matrix, figure, f"outer attention, layer {args.layer}")
    elif args.kind == "class-attn":
        ca = ix.export_class_attention(model, img, args.layer, out)
        if figure:
            from .plotting import grid_map

            grid_map(ca.as_grid(), figure, f"class-token attention, layer {args.layer}")
    else:
        maps = ix.export_word_feature_maps(model, img, args.layer, out)
        if figure:
            from .plotting import word_feature_mosaic

            word_feature_mosaic(maps, model.config.grid, figure, f"word features, layer {args.layer}")
    print(f"wrote {out}" + (f" and {figure}" if figure else ""))
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tnt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("describe", help="parameter and FLOP table for a configuration")
    _add_config_args(p, "tnt-s")
    p.add_argument("--json", action="store_true", help="emit JSON instead of the text table")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("check", help="gradient and attention-oracle checks on TNT-micro")
    p.add_argument("--eps", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("train", help="train on a synthetic task, write metrics and a checkpoint")
    _add_config_args(p, "tnt-micro")
    p.add_argument("--task", default="subpatch")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--n-train", type=int, default=4096)
    p.add_argument("--n-test", type=int, default=1024)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--log-every", type=int, default=100, help="print every k steps (0 silences)")
    p.add_argument("--figures", action="store_true", help="also render training curves to PNG")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--seed", type=int, default=None, help="data seed (default: the training seed)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="dump attention maps or word features")
    _add_config_args(p, "tnt-micro")
    p.add_argument("--kind", required=True, choices=("inner-attn", "outer-attn", "class-attn", "word-features"))
    p.add_argument("--ckpt", help="checkpoint to load (otherwise a fresh model from --preset/--seed)")
    p.add_argument("--image", help="PPM (P6) or TNTR raw image; default is a held-out task image or noise")
    p.add_argument("--index", type=int, default=0, help="held-out sample when no --image is given")
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--sentence", type=int, default=0)
    p.add_argument("--head", default="0", help="head index or 'mean'")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", default="export.tnta", help="output file; a .csv suffix writes CSV")
    p.add_argument("--figure", action="store_true", help="also render a PNG next to the output")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with _threads():
            return args.func(args)
    except UsageError as exc:
        print(f"tnt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FormatError, OSError) as exc:
        print(f"tnt: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:  # ConfigError, ExportError and bad argument values
        print(f"tnt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
