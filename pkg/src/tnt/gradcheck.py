"""Central finite-difference checks against tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STEP = 1e-5
# denominators are floored so analytically-zero gradients (e.g. the key bias,
# which shifts every score of a query row equally) compare on absolute error;
# check_parameters scales the floor by |loss| because the rounding noise of a
# central difference is about eps_machine * |f| / step
FLOOR = 1e-6


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = FLOOR) -> float:
    a, b = np.ravel(a), np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / den)


def numeric_grad(f: Callable[[], float], array: np.ndarray, eps: float = STEP, indices=None) -> np.ndarray:
    """d f / d array at the flat ``indices`` (all when None), perturbing in place."""
    flat = array.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else flat.size)
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * eps)
    return out


def directional_derivative(f: Callable[[], float], array: np.ndarray, direction: np.ndarray, eps: float = STEP) -> float:
    base = array.copy()
    array += eps * direction
    fp = f()
    array[...] = base - eps * direction
    fm = f()
    array[...] = base
    return (fp - fm) / (2 * eps)


def check_function(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = STEP,
    seed: int = 0,
) -> list[float]:
    """Relative error per input of ``sum(fn(*inputs) * R)`` for a fixed random R.

    Every coordinate of every input is differenced; meant for small tensors.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weights = np.random.default_rng(seed).uniform(-1.0, 1.0, size=out.shape)
    ad.backward(ad.sum_(ad.multiply(out, Tensor(weights))))

    def value() -> float:
        with ad.no_grad():
            return float((fn(*[Tensor(a) for a in arrays]).data * weights).sum())

    errs = []
    for a, t in zip(arrays, tensors):
        g = t.grad if t.grad is not None else np.zeros_like(a)
        errs.append(relative_error(g, numeric_grad(value, a, eps)))
    return errs


def check_parameters(
    loss_fn: Callable[[], Tensor],
    named_params: Sequence[tuple[str, Tensor]],
    eps: float = STEP,
    coords: int = 4,
    seed: int = 0,
) -> dict[str, float]:
    """Per parameter tensor: worst of a random directional check and sampled coordinates.

    ``loss_fn`` must rebuild the graph from the current parameter data each call.
    """
    for _, p in named_params:
        p.grad = None
    out = loss_fn()
    floor = FLOOR * max(1.0, abs(float(out.data)))
    ad.backward(out)
    grads = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for name, p in named_params}

    def value() -> float:
        with ad.no_grad():
            return float(loss_fn().data)

    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in named_params:
        g = grads[name]
        direction = rng.standard_normal(p.shape)
        fd_dir = directional_derivative(value, p.data, direction, eps)
        err = relative_error(np.array([(g * direction).sum()]), np.array([fd_dir]), floor)
        idx = rng.choice(p.size, size=min(coords, p.size), replace=False)
        fd = numeric_grad(value, p.data, eps, idx)
        err = max(err, relative_error(g.reshape(-1)[idx], fd, floor))
        errors[name] = err
    for _, p in named_params:
        p.grad = None
    return errors
