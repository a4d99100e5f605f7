"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-6,
                    max_entries: int = 24, seed: int = 0) -> float:
    """Worst relative error between analytic and numeric gradients of ``sum(w * fn())``.

    ``w`` is a fixed random weighting so every output element matters. Each
    leaf must hold float64 data; up to ``max_entries`` entries per leaf are probed,
    half of them drawn from entries whose analytic gradient is nonzero so that a
    sparse gradient is never compared only on its zeros.
    """
    rng = np.random.default_rng(seed)
    for leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise TypeError("gradient checks need float64 leaves")
        leaf.requires_grad = True
        leaf.grad = None
    with Tape() as tape:
        out = fn()
        weights = Tensor(rng.standard_normal(out.shape))
        loss = ops.sum(ops.mul(out, weights))
        tape.backward(loss)

    def value() -> float:
        return float(np.sum(fn().data * weights.data))

    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        flat = leaf.data.reshape(-1)
        picks = _picks(analytic.reshape(-1), max_entries, rng)
        numeric = np.empty(picks.size)
        for j, idx in enumerate(picks):
            orig = flat[idx]
            flat[idx] = orig + eps
            _bump(leaf)
            up = value()
            flat[idx] = orig - eps
            _bump(leaf)
            down = value()
            flat[idx] = orig
            _bump(leaf)
            numeric[j] = (up - down) / (2 * eps)
        worst = max(worst, relative_error(analytic.reshape(-1)[picks], numeric))
        leaf.grad = None
    return worst


def _picks(grad: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    n = min(n, grad.size)
    live = np.flatnonzero(grad)
    first = rng.choice(live, size=min(n // 2, live.size), replace=False)
    rest = np.setdiff1d(np.arange(grad.size), first)
    return np.concatenate([first, rng.choice(rest, size=n - first.size, replace=False)])


def _bump(leaf: Tensor) -> None:
    # parameters cache derived values keyed on their version
    if hasattr(leaf, "version"):
        leaf.version += 1
