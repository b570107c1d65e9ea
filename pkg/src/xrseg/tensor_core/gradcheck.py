"""Central finite-difference gradient checking (use float64 inputs)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def fd_step(x: float) -> float:
    return 1e-5 * (1.0 + abs(x))


def numerical_grad(fn: Callable[[], Tensor], arr: np.ndarray, indices=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``arr`` (mutated in place, then restored).

    ``indices`` restricts the computation to the given flat positions; other
    entries of the result are left at zero.
    """
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        h = fd_step(orig)
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs deviation scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    """Compare tape gradients of ``fn(*inputs)`` against finite differences.

    Only inputs with ``requires_grad`` are checked. Returns the worst
    relative error across them.
    """
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        loss = fn(*inputs)
    tape.backward(loss)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(lambda: fn(*inputs), t.data)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
