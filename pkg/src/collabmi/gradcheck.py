"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor, backward


def finite_difference_check(function, point: Tensor, step: float = 1e-6, indices=None) -> float:
    """Largest relative error between ``backward`` and central differences.

    ``function`` maps a tensor to a scalar tensor; it is re-evaluated at
    ``point ± step`` along each checked coordinate (all of them, or the flat
    positions in ``indices``). Relative error uses the denominator
    ``max(|a|, |b|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError(f"step must be positive, got {step}")
    base = np.array(point.data, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    (analytic,) = backward(function(probe), [probe])
    analytic = analytic.ravel()
    flat = base.ravel()
    coords = range(flat.size) if indices is None else np.asarray(indices, dtype=np.intp)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = function(Tensor(base)).item()
        flat[i] = orig - step
        f_minus = function(Tensor(base)).item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def parameter_check(loss_fn, params: dict, name: str, step: float = 1e-6, n_coords: int | None = None, rng=None) -> float:
    """Finite-difference check of ``loss_fn(params)`` w.r.t. ``params[name]``.

    Other entries of ``params`` are held fixed. ``n_coords`` samples a random
    subset of coordinates for large tensors.
    """
    target = params[name]
    coords = None
    if n_coords is not None and n_coords < target.size:
        rng = np.random.default_rng(0) if rng is None else rng
        coords = rng.choice(target.size, size=n_coords, replace=False)

    def f(t):
        swapped = dict(params)
        swapped[name] = t
        return loss_fn(swapped)

    return finite_difference_check(f, target, step, coords)
