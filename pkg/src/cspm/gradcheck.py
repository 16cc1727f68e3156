"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grads(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    coords: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """d f / d input for each input, by central differences on its ``data``.

    ``coords`` optionally restricts each input to a set of flat indices;
    the other entries are left at zero.
    """
    out = []
    for k, t in enumerate(inputs):
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in (range(flat.size) if coords is None else coords[k]):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def analytic_grads(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
    f().backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray], floor: float = 1e-8) -> float:
    """max over elements of |a - n| / max(|a|, floor)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(np.abs(a), floor))))
    return worst


def check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
          max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between backprop and finite differences (64-bit inputs expected).

    With ``max_coords`` each input is probed at no more than that many
    entries, drawn mostly from those with a nonzero analytic gradient.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks run at 64-bit precision")
    analytic = analytic_grads(f, inputs)
    if max_coords is None:
        return max_relative_error(analytic, numerical_grads(f, inputs, h))
    rng = np.random.default_rng(seed)
    coords = []
    for a in analytic:
        flat = a.reshape(-1)
        if flat.size <= max_coords:
            coords.append(np.arange(flat.size))
            continue
        live = np.flatnonzero(flat)
        pick = rng.choice(live, min(len(live), max_coords * 3 // 4), replace=False) if len(live) else live
        rest = rng.choice(flat.size, max_coords - len(pick), replace=False)
        coords.append(np.union1d(pick, rest))
    numeric = numerical_grads(f, inputs, h, coords)
    picked_a = [a.reshape(-1)[c] for a, c in zip(analytic, coords)]
    picked_n = [n.reshape(-1)[c] for n, c in zip(numeric, coords)]
    return max_relative_error(picked_a, picked_n)
