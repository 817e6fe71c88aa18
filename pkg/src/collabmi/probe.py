"""Sanity probe for the MI estimator on synthetic view pairs with known dependence.

Only the global discriminator is trained, on fresh batches at every step;
the returned value is its JS estimate on a held-out batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .mvmi import estimate_js_mi, project, score_global
from .network import NetworkConfig, NetworkParams, init_params
from .scene import GridConfig
from .train import adam_update

GLOBAL_PARAMS = ("disc.proj.", "disc.g")


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 300
    batch: int = 64
    eval_batch: int = 2048
    lr: float = 1e-3
    noise: float = 0.1  # relative to the unit feature std
    grid: GridConfig = GridConfig(size=8)
    network: NetworkConfig = NetworkConfig()


def synthetic_views(rng, k: int, shape, dependent: bool, noise: float = 0.1):
    """``(individual, collaborative, negative)`` batches of unit-variance views.

    Dependent collaborative views are noisy copies of the individual ones;
    independent ones are fresh draws. Negatives are always fresh draws.
    """
    ind = rng.standard_normal((k, *shape))
    collab = ind + noise * rng.standard_normal(ind.shape) if dependent else rng.standard_normal(ind.shape)
    return ind, collab, rng.standard_normal((k, *shape))


def global_estimate(params: NetworkParams, ind, collab, neg) -> T.Tensor:
    proj = project(T.tensor(collab), params)
    return estimate_js_mi(score_global(T.tensor(ind), proj, params), score_global(T.tensor(neg), proj, params))


def fit_global_discriminator(seed: int, dependent: bool, config: ProbeConfig = ProbeConfig()) -> float:
    """Held-out JS estimate (nats) after maximising it over the global discriminator."""
    rng = np.random.default_rng(seed)
    params = init_params(config.network, config.grid, rng)
    size = config.grid.size // 2
    shape = (size, size, config.network.feature_channels)
    names = [n for n in params.names("cmimnet") if n.startswith(GLOBAL_PARAMS)]
    m = {n: np.zeros(params[n].shape) for n in names}
    v = {n: np.zeros(params[n].shape) for n in names}
    for t in range(1, config.steps + 1):
        batch = synthetic_views(rng, config.batch, shape, dependent, config.noise)
        grads = T.backward(-global_estimate(params, *batch), [params[n] for n in names])
        updates = {}
        for n, g in zip(names, grads):
            new, m[n], v[n] = adam_update(params[n].data, g, m[n], v[n], t, config.lr)
            updates[n] = T.parameter(new)
        params = params.replaced(updates)
    held_out = synthetic_views(rng, config.eval_batch, shape, dependent, config.noise)
    return global_estimate(params, *held_out).item()
