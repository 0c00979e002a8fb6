"""Central finite-difference oracle for checking tape gradients."""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-3,
                   indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    With ``indices`` only those entries are filled; the rest stay zero.
    """
    out = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    positions = range(x.size) if indices is None else (np.ravel_multi_index(i, x.shape) for i in indices)
    for pos in positions:
        orig = flat[pos]
        flat[pos] = orig + eps
        hi = float(f().data)
        flat[pos] = orig - eps
        lo = float(f().data)
        flat[pos] = orig
        out.reshape(-1)[pos] = (hi - lo) / (2 * eps)
    return out


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    return [p.grad.astype(np.float64) for p in params]


def grad_mismatch(analytic: np.ndarray, numeric: np.ndarray, rtol: float, atol: float) -> np.ndarray:
    """Boolean mask of entries where ``|a - n| > max(rtol * max(|a|, |n|), atol)``."""
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.abs(analytic - numeric) > np.maximum(rtol * scale, atol)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
                    rtol: float = 1e-2, atol: float = 1e-4, samples_per_param: int | None = None,
                    rng: np.random.Generator | None = None) -> list[tuple[str, float, int]]:
    """Compare backward against finite differences.

    Returns one ``(name, worst_abs_error, n_failures)`` row per parameter. With
    ``samples_per_param`` a random subset of entries is checked per tensor.
    """
    rng = rng or np.random.default_rng(0)
    grads = analytic_grads(f, params)
    rows = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if samples_per_param is None or samples_per_param >= p.size:
            idx = None
            sel = np.ones(p.shape, dtype=bool)
        else:
            flat = rng.choice(p.size, size=samples_per_param, replace=False)
            idx = [np.unravel_index(k, p.shape) for k in flat]
            sel = np.zeros(p.shape, dtype=bool)
            sel.reshape(-1)[flat] = True
        num = numerical_grad(f, p, eps, idx)
        bad = grad_mismatch(g[sel], num[sel], rtol, atol)
        worst = float(np.abs(g[sel] - num[sel]).max()) if sel.any() else 0.0
        rows.append((p.name or f"param{i}", worst, int(bad.sum())))
    return rows
