"""Joint training of the perception pipeline and the MI discriminators.

The objective is

    total = (1 - alpha) * (L_CLS + L_REG) + alpha * L_MI,
    L_MI  = lambda * (beta_g * L_GMI + beta_l * L_LMI),

minimised with Adam over two parameter groups (pipeline and
discriminators) that use separate learning rates and a shared multistep
decay.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .mvmi import batch_mi_losses
from .network import NetworkConfig, NetworkParams, decode_batch, encode_batch, init_params
from .pipeline import align, early_stack, encode_scenes, forward_intermediate, negative_layout, stacked_labels
from .scene import GridConfig
from .tensor import Tensor

MODES = ("intermediate", "none", "early")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    lam: float = 0.1
    beta_g: float = 0.5
    beta_l: float = 0.5
    lr_pipeline: float = 1e-3
    lr_cmimnet: float = 1e-4
    milestones: tuple = (0.6, 0.8)
    gamma: float = 0.5

    def validate(self, prefix: str = "loss"):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"{prefix}.alpha", f"must lie in [0, 1], got {self.alpha}")
        if self.lam <= 0:
            raise ConfigError(f"{prefix}.lam", f"must be positive, got {self.lam}")
        for name in ("beta_g", "beta_l"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{prefix}.{name}", "must be non-negative")
        if self.alpha > 0 and self.beta_g + self.beta_l <= 0:
            raise ConfigError(f"{prefix}.beta_g", "beta_g + beta_l must be positive when alpha > 0")
        for name in ("lr_pipeline", "lr_cmimnet"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{prefix}.{name}", "must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"{prefix}.milestones", f"must be strictly increasing, got {list(self.milestones)}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"{prefix}.gamma", f"must lie in (0, 1], got {self.gamma}")


@dataclass(frozen=True)
class LossBreakdown:
    l_cls: float
    l_reg: float
    l_gmi: float
    l_lmi: float
    l_mi: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


# -- losses --------------------------------------------------------------------------
def _fg_weights(fg: np.ndarray) -> np.ndarray:
    """Per-voxel weights: foreground voxels get the clamped background/foreground ratio of their sample."""
    flat = fg.reshape(fg.shape[0], -1)
    n_fg = flat.sum(axis=1)
    n_bg = flat.shape[1] - n_fg
    ratio = np.clip(n_bg / np.maximum(n_fg, 1), 1.0, 100.0)
    return np.where(flat > 0, ratio[:, None], 1.0).reshape(fg.shape)


def downstream_loss(cls_logits: Tensor, reg: Tensor, foreground, reg_target):
    """``(L_CLS, L_REG)`` for batched heads ``[E, H, W]`` / ``[E, H, W, 4]``.

    L_CLS is a class-balanced binary cross entropy (weighted mean per sample,
    then mean over samples); L_REG is smooth-L1 summed over the four targets
    and averaged over foreground voxels.
    """
    fg = np.asarray(foreground, dtype=np.float64)
    if cls_logits.ndim == 2:
        cls_logits, reg, fg = cls_logits.reshape(1, *cls_logits.shape), reg.reshape(1, *reg.shape), fg[None]
        reg_target = np.asarray(reg_target)[None]
    if cls_logits.shape != fg.shape or reg.shape != fg.shape + (4,):
        raise ContractError(f"head shapes {cls_logits.shape}/{reg.shape} do not match labels {fg.shape}")
    w = _fg_weights(fg)
    w = w / w.reshape(w.shape[0], -1).sum(axis=1).reshape(-1, 1, 1) / w.shape[0]
    per_voxel = T.softplus(cls_logits) - cls_logits * fg
    l_cls = (per_voxel * w).sum()
    n_fg = fg.sum()
    if n_fg == 0:
        return l_cls, Tensor(0.0)
    mask = np.repeat(fg[..., None], 4, axis=-1) / n_fg
    diff = reg - np.where(mask > 0, np.nan_to_num(np.asarray(reg_target, dtype=np.float64)), 0.0)
    l_reg = (T.smooth_l1(diff) * mask).sum()
    return l_cls, l_reg


def total_loss(l_cls, l_reg, l_gmi, l_lmi, config: LossConfig):
    """Returns ``(total, breakdown)``; ``total`` is a tensor when any input is."""
    config.validate()
    l_mi = (l_gmi * config.beta_g + l_lmi * config.beta_l) * config.lam
    total = (l_cls + l_reg) * (1.0 - config.alpha) + l_mi * config.alpha
    parts = LossBreakdown(*(_value(v) for v in (l_cls, l_reg, l_gmi, l_lmi, l_mi, total)))
    return total, parts


# -- optimisation --------------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8


def adam_update(value, grad, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Bias-corrected Adam step; ``m`` and ``v`` are updated in place and returned."""
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * (grad * grad)
    denom = np.sqrt(v)
    denom /= math.sqrt(1 - b2**t)
    denom += eps
    step = np.divide(m, denom, out=denom)
    step *= lr / (1 - b1**t)
    return value - step, m, v


def optimizer_step(params: NetworkParams, grads: dict, state: AdamState, lr):
    """One Adam step. ``lr`` is a float or a ``{"pipeline": ..., "cmimnet": ...}`` mapping."""
    rates = lr if isinstance(lr, dict) else {"pipeline": lr, "cmimnet": lr}
    state.step += 1
    updates = {}
    for group, rate in rates.items():
        for name in params.names(group):
            if name not in grads:
                continue
            value = params[name].data
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != value.shape:
                raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {value.shape}")
            m = state.m[name] if name in state.m else np.zeros_like(value)
            v = state.v[name] if name in state.v else np.zeros_like(value)
            new, state.m[name], state.v[name] = adam_update(value, g, m, v, state.step, rate, state.b1, state.b2, state.eps)
            updates[name] = T.parameter(new)
    return params.replaced(updates), state


def lr_schedule(step: int, milestones, gamma: float) -> float:
    # rounding fractional milestones to steps can make neighbours coincide
    if any(b < a for a, b in zip(milestones, milestones[1:])):
        raise ContractError(f"milestones must be non-decreasing, got {list(milestones)}")
    return gamma ** sum(step >= m for m in milestones)


# -- training loop -------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    loss: LossConfig = LossConfig()
    network: NetworkConfig = NetworkConfig()
    grid: GridConfig = GridConfig()


@dataclass
class TrainResult:
    params: NetworkParams
    log: list
    mode: str
    seed: int


def feature_resolution(grid: GridConfig) -> float:
    return grid.resolution * 2  # one stride-2 encoder stage


def intermediate_losses(batch, negatives, params, grid: GridConfig, loss: LossConfig, with_mi: bool = True):
    """Forward pass for every ego of ``batch``; returns the four loss terms."""
    res = feature_resolution(grid)
    fwd = forward_intermediate(batch, params, res)
    fg, reg_t = stacked_labels(batch)
    l_cls, l_reg = downstream_loss(fwd.cls_logits, fwd.reg, fg, reg_t)
    if not with_mi:
        return l_cls, l_reg, Tensor(0.0), Tensor(0.0)
    layout = fwd.layout
    neg_layout = negative_layout(layout, batch, negatives)
    neg_aligned = align(encode_scenes(negatives, params), negatives, neg_layout, res, params)
    group = np.repeat(np.arange(layout.n_groups), layout.group_sizes)
    pair_w = np.repeat([1.0 / (n * layout.n_groups) for n in layout.group_sizes], layout.group_sizes)
    l_gmi, l_lmi = batch_mi_losses(fwd.aligned, neg_aligned, fwd.fused, group, pair_w, params, local=loss.beta_l != 0)
    return l_cls, l_reg, l_gmi, l_lmi


def single_losses(bev: np.ndarray, batch, params):
    cls, reg = decode_batch(encode_batch(Tensor(bev), params), params)
    fg, reg_t = stacked_labels(batch)
    l_cls, l_reg = downstream_loss(cls, reg, fg, reg_t)
    return l_cls, l_reg, Tensor(0.0), Tensor(0.0)


def batch_losses(mode: str, batch, negatives, params, grid: GridConfig, loss: LossConfig):
    if mode == "intermediate":
        return intermediate_losses(batch, negatives, params, grid, loss, with_mi=loss.alpha > 0)
    if mode == "none":
        return single_losses(np.concatenate([d.bev for d in batch]), batch, params)
    if mode == "early":
        return single_losses(early_stack(batch, grid.resolution), batch, params)
    raise ContractError(f"unknown training mode {mode!r}; expected one of {MODES}")


def train(dataset, config: TrainConfig, seed: int, mode: str = "intermediate", log_path=None, checkpoint_path=None) -> TrainResult:
    """Deterministic training run; writes a JSON-lines epoch log and a checkpoint when paths are given.

    Each iteration draws ``B`` scenes and ``B`` further scenes as negatives,
    disjoint from the batch.
    """
    if mode not in MODES:
        raise ContractError(f"unknown training mode {mode!r}; expected one of {MODES}")
    config.loss.validate()
    b = config.batch_size
    if b < 1:
        raise ConfigError("train.batch_size", "must be at least 1")
    n = len(dataset)
    if n < 2 * b:
        raise ContractError(f"dataset has {n} scenes; need at least {2 * b} to draw disjoint negatives")
    rng = np.random.default_rng(seed)
    params = init_params(config.network, config.grid, rng, with_discriminators=mode == "intermediate")
    params.meta.update({"mode": mode, "seed": seed, "epochs": config.epochs})
    state = AdamState()
    iters = n // b
    total_steps = config.epochs * iters
    milestones = [int(round(f * total_steps)) for f in config.loss.milestones]
    log = []
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w")
    try:
        step = 0
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            order = rng.permutation(n)
            rows = []
            for it in range(iters):
                idx = order[it * b : (it + 1) * b]
                rest = np.setdiff1d(np.arange(n), idx)
                neg_idx = rng.choice(rest, size=b, replace=False)
                batch = [dataset[i] for i in idx]
                negatives = [dataset[i] for i in neg_idx]
                mult = lr_schedule(step, milestones, config.loss.gamma)
                terms = batch_losses(mode, batch, negatives, params, config.grid, config.loss)
                total, parts = total_loss(*terms, config.loss)
                names = params.names()
                grads = T.backward(total, [params[k] for k in names])
                lrs = {"pipeline": config.loss.lr_pipeline * mult, "cmimnet": config.loss.lr_cmimnet * mult}
                params, state = optimizer_step(params, dict(zip(names, grads)), state, lrs)
                rows.append(parts)
                step += 1
            means = {k: float(np.mean([getattr(r, k) for r in rows])) for k in LossBreakdown.__dataclass_fields__}
            record = {"epoch": epoch, **means, "lr_multiplier": lr_schedule(step - 1, milestones, config.loss.gamma),
                      "wall_time": time.perf_counter() - start}
            log.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    if checkpoint_path is not None:
        params.save(checkpoint_path)
    return TrainResult(params, log, mode, seed)


def is_finite_log(log) -> bool:
    return all(math.isfinite(r["total"]) for r in log)
