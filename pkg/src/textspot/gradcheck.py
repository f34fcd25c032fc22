"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``t``.

    The step is ``eps * max(1, |x|)``. When ``indices`` is given only those
    entries are perturbed; the rest of the result stays zero.
    """
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    it = range(flat.size) if indices is None else [np.ravel_multi_index(i, t.shape) for i in indices]
    with no_grad():
        for k in it:
            orig = flat[k]
            h = eps * max(1.0, abs(float(orig)))
            flat[k] = orig + h
            fp = float(fn().data)
            flat[k] = orig - h
            fm = float(fn().data)
            flat[k] = orig
            grad.reshape(-1)[k] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    loss = fn()
    backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else np.array(p.grad, dtype=np.float64)
            for p in params]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``max|a-b| / max(max|a|, max|b|, floor)`` over all entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between backprop and finite differences over ``params``.

    ``max_entries`` caps the number of perturbed entries per tensor (sampled
    with ``rng``) to keep large checks affordable.
    """
    ana = analytic_grads(fn, params)
    worst = 0.0
    for p, ga in zip(params, ana):
        idx = None
        if max_entries is not None and p.size > max_entries:
            rng = rng or np.random.default_rng(0)
            picks = rng.choice(p.size, size=max_entries, replace=False)
            idx = [np.unravel_index(i, p.shape) for i in picks]
        gn = numerical_grad(fn, p, eps=eps, indices=idx)
        if idx is not None:
            sel = tuple(np.array(i) for i in zip(*idx))
            worst = max(worst, relative_error(ga[sel], gn[sel]))
        else:
            worst = max(worst, relative_error(ga, gn))
    return worst
