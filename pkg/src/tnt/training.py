"""Desk-scale supervised training: AdamW, warmup + cosine, label smoothing.

Default hyper-parameters follow the ImageNet recipe (AdamW, lr 1e-3, weight
decay 0.05, cosine decay, label smoothing 0.1, drop path 0.1, warmup of
5/300 of the run) applied to a 2,000 step, batch 32 budget.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Model, forward, seed_stream


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: Model, log: list[dict]):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.last_good = last_good
        self.log = log


# ---------------------------------------------------------------- optimizer


def decays(name: str) -> bool:
    """Weight decay applies to linear weight matrices only.

    Norm affines, biases, position encodings and the class token are exempt.
    """
    return name.endswith(".weight")


@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "weight_decay": self.weight_decay}


def adamw_step(named_params, grads, state: OptimState, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place on the parameter data.

    ``named_params`` is a list of ``(name, Tensor)``; ``grads`` maps the same
    names to arrays.  Nothing is updated if any gradient is non-finite.
    """
    lr = state.lr if lr is None else lr
    for name, p in named_params:
        g = grads[name]
        if g.shape != p.shape:
            raise ad.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}; step {state.step + 1} aborted")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in named_params:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and decays(name):
            update = update + state.weight_decay * p.data
        p.data -= lr * update


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * progress))


def smoothed_cross_entropy(logits: Tensor, labels, smoothing: float = 0.1) -> Tensor:
    """Mean of -sum_k q_k log softmax(logits)_k, q = (1-eps) onehot + eps/K."""
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, logits.shape[0]))
    batch, k = logits.shape
    q = np.full((batch, k), smoothing / k)
    q[np.arange(batch), labels] += 1.0 - smoothing
    logp = ad.log_softmax(logits, axis=-1)
    return ad.scale(ad.sum_(ad.multiply(logp, Tensor(q))), -1.0 / batch)


# ---------------------------------------------------------------- toy data


@dataclass
class ToyDataset:
    images: np.ndarray  # (N, H, W, 3), pixel scale
    labels: np.ndarray
    seed: int
    descriptor: dict

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.descriptor.get("n_classes", int(self.labels.max()) + 1))


# words that carry texture, per class, inside a 2 x 2 word grid
_ARRANGEMENTS = {
    0: ((0, 1), (2, 3)),  # one full row of words
    1: ((0, 2), (1, 3)),  # one full column of words
}


def make_subpatch_task(
    seed: int, n_samples: int, split: str = "train", size: int = 32, patch: int = 8, sub: int = 4
) -> ToyDataset:
    """Two-class images decided by where textured words sit inside each patch.

    Every 8x8 patch is a 2x2 grid of 4x4 words.  Two words carry a
    checkerboard texture: a row of words for class 0, a column for class 1.
    Samples come in (class 0, class 1) pairs that share one field of per-patch
    channel means, and each patch is shifted to hit that mean exactly, so
    patch-level statistics carry no label information.
    """
    if n_samples % 2:
        raise ValueError("n_samples must be even (samples are generated in class pairs)")
    k = patch // sub
    if k != 2:
        raise ValueError("the arrangement task needs a 2x2 word grid per patch")
    rng = seed_stream(seed, f"data/subpatch/{split}")
    g = size // patch
    yy, xx = np.indices((sub, sub))
    checker = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
    images = np.empty((n_samples, size, size, 3))
    labels = np.empty(n_samples, dtype=int)
    for pair in range(n_samples // 2):
        means = rng.uniform(80.0, 175.0, size=(g, g, 3))
        for label in (0, 1):
            amp = rng.uniform(35.0, 50.0)
            img = rng.normal(0.0, 8.0, size=(size, size, 3))
            choice = rng.integers(0, 2, size=(g, g))
            for pr in range(g):
                for pc in range(g):
                    for w in _ARRANGEMENTS[label][choice[pr, pc]]:
                        r0 = pr * patch + (w // k) * sub
                        c0 = pc * patch + (w % k) * sub
                        img[r0 : r0 + sub, c0 : c0 + sub, :] += amp * checker[:, :, None]
            blocks = img.reshape(g, patch, g, patch, 3)
            blocks += (means - blocks.mean(axis=(1, 3)))[:, None, :, None, :]
            idx = 2 * pair + label
            images[idx] = blocks.reshape(size, size, 3)
            labels[idx] = label
    descriptor = {"task": "subpatch", "split": split, "n_samples": n_samples, "size": size,
                  "patch": patch, "sub": sub, "n_classes": 2}
    return ToyDataset(images, labels, seed, descriptor)


def save_dataset(dataset: ToyDataset, directory) -> None:
    """Cache as raw tensor files plus a JSON descriptor."""
    from .tokenizer import save_raw

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_raw(d / "images.raw", dataset.images)
    save_raw(d / "labels.raw", dataset.labels.astype(np.float64))
    (d / "dataset.json").write_text(json.dumps({"seed": dataset.seed, "descriptor": dataset.descriptor}, indent=2))


def load_dataset(directory) -> ToyDataset:
    from .tokenizer import load_raw

    d = Path(directory)
    info = json.loads((d / "dataset.json").read_text())
    labels = load_raw(d / "labels.raw").astype(int)
    return ToyDataset(load_raw(d / "images.raw"), labels, info["seed"], info["descriptor"])


def patch_means(images: np.ndarray, patch: int = 8) -> np.ndarray:
    n, h, w, c = images.shape
    return images.reshape(n, h // patch, patch, w // patch, patch, c).mean(axis=(2, 4))


def patch_mean_linear_accuracy(train: ToyDataset, test: ToyDataset, patch: int = 8) -> float:
    """Least-squares linear classifier on patch means only; held-out accuracy."""

    def feats(ds):
        f = patch_means(ds.images, patch).reshape(len(ds), -1)
        return np.hstack([f, np.ones((len(ds), 1))])

    targets = np.where(train.labels == 1, 1.0, -1.0)
    w, *_ = np.linalg.lstsq(feats(train), targets, rcond=None)
    pred = (feats(test) @ w > 0).astype(int)
    return float((pred == test.labels).mean())


# ---------------------------------------------------------------- loop


@dataclass
class Schedule:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_steps: int | None = None  # None: 5/300 of the run
    label_smoothing: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return round(self.steps * 5 / 300)


def _restored(model: Model, arrays: dict[str, np.ndarray]) -> Model:
    snapshot = copy.deepcopy(model)
    for name, p in snapshot.named_parameters():
        p.data = arrays[name].copy()
        p.grad = None
    return snapshot


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Top-1 accuracy in inference mode."""
    correct = 0
    with ad.no_grad():
        for i in range(0, len(labels), batch_size):
            logits = forward(model, images[i : i + batch_size])
            correct += int((logits.data.argmax(axis=-1) == labels[i : i + batch_size]).sum())
    return correct / len(labels)


def train(
    model: Model,
    dataset: ToyDataset,
    schedule: Schedule,
    seed: int = 0,
    state: OptimState | None = None,
    on_record=None,
) -> tuple[Model, list[dict], OptimState]:
    """Train in place; returns the model, per-step records and optimizer state.

    Batches come from the ``data`` stream and drop-path masks from the
    ``droppath`` stream of ``seed``, so a rerun reproduces every loss exactly.
    """
    state = state or OptimState(schedule.lr, schedule.betas, schedule.eps, schedule.weight_decay)
    batch_rng = seed_stream(seed, "data/batches")
    drop_rng = seed_stream(seed, "droppath")
    named = model.named_parameters()
    log: list[dict] = []
    order = np.empty(0, dtype=int)
    cursor = 0
    previous = {name: p.data.copy() for name, p in named}
    for step in range(schedule.steps):
        if cursor + schedule.batch_size > len(order):
            order = batch_rng.permutation(len(dataset))
            cursor = 0
        idx = order[cursor : cursor + schedule.batch_size]
        cursor += schedule.batch_size
        lr = lr_at(step, schedule.steps, schedule.warmup, schedule.lr)

        model.zero_grad()
        logits = forward(model, dataset.images[idx], training=True, rng=drop_rng)
        loss = smoothed_cross_entropy(logits, dataset.labels[idx], schedule.label_smoothing)
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            raise TrainingDiverged(step, _restored(model, previous), log)
        ad.backward(loss)
        grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in named}
        if schedule.grad_clip is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > schedule.grad_clip:
                grads = {k: g * (schedule.grad_clip / total) for k, g in grads.items()}
        previous = {name: p.data.copy() for name, p in named}
        adamw_step(named, grads, state, lr=lr)

        acc = float((logits.data.argmax(axis=-1) == dataset.labels[idx]).mean())
        record = {"step": step, "lr": lr, "loss": loss_value, "acc": acc}
        log.append(record)
        if on_record is not None:
            on_record(record)
    model.zero_grad()
    return model, log, state
