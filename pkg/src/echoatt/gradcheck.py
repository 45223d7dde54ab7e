"""Central finite-difference check of backward gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_grad(loss_fn: Callable[[], Tensor], t: Tensor, index: tuple, h: float = 1e-5) -> float:
    flat = t.data.reshape(-1) if t.data.flags.c_contiguous else None
    if flat is None:
        raise ValueError("gradient check needs C-contiguous tensors")
    pos = np.ravel_multi_index(index, t.shape)
    orig = flat[pos]
    with T.no_grad():
        flat[pos] = orig + h
        up = loss_fn().item()
        flat[pos] = orig - h
        down = loss_fn().item()
    flat[pos] = orig
    return (up - down) / (2.0 * h)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error ``|g - fd| / max(|g|, |fd|)`` over ``tensors``.

    Norms are taken per tensor over the checked coordinates; with ``max_coords``
    a random subset of each tensor's entries is checked.
    """
    for t in tensors:
        t.grad = None
    T.backward(loss_fn())
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        coords = list(np.ndindex(t.shape))
        if max_coords is not None and len(coords) > max_coords:
            coords = [coords[i] for i in rng.choice(len(coords), max_coords, replace=False)]
        a = np.array([analytic[c] for c in coords])
        n = np.array([numeric_grad(loss_fn, t, c, h) for c in coords])
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst
