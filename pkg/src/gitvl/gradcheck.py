"""Central-difference gradient oracle.

Used by the test-suite to check every backward rule independently of the
autodiff engine: the oracle only ever calls the forward function.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5,
                   indices: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """d fn() / d param by central differences.

    ``fn`` must be a closure reading ``param.data`` and returning a scalar.
    When ``indices`` is given only those entries are estimated; the rest of
    the returned array is NaN.
    """
    data = param.data
    out = np.full(data.shape, np.nan) if indices is not None else np.zeros(data.shape)
    it = indices if indices is not None else list(np.ndindex(*data.shape))
    with no_grad():
        for idx in it:
            orig = data[idx]
            data[idx] = orig + eps
            fp = fn().data.item()
            data[idx] = orig - eps
            fm = fn().data.item()
            data[idx] = orig
            out[idx] = (fp - fm) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max entrywise gap, relative to the larger of the two gradients' peak magnitude.

    Entries where ``numeric`` is NaN (not sampled) are ignored.
    """
    mask = ~np.isnan(numeric)
    a = np.asarray(analytic, dtype=np.float64)[mask]
    n = numeric[mask]
    if a.size == 0:
        return 0.0
    denom = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
    return float(np.abs(a - n).max() / denom)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Run backward once and compare every parameter against the oracle.

    Returns ``{name: relative error}``. ``max_entries`` caps the number of
    sampled coordinates per parameter to keep large checks fast.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    errors = {}
    for i, p in enumerate(params):
        indices = None
        if max_entries is not None and p.size > max_entries:
            flat = rng.choice(p.size, size=max_entries, replace=False)
            indices = [np.unravel_index(int(k), p.shape) for k in flat]
        num = numerical_grad(fn, p, eps=eps, indices=indices)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[p.name or f"param{i}"] = relative_error(analytic, num)
    return errors
