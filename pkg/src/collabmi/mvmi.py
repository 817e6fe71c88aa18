"""Contrastive estimation of mutual information between individual and fused views.

A positive pair couples a fused (collaborative) view with one of the
individual views it was built from; a negative pair keeps the fused view
and swaps in the same sender's view from a different scene. Two
discriminators score pairs: a global one on the whole flattened view and a
local one that scores every voxel's feature vector separately. Scores feed
the Jensen-Shannon estimator

    E_pos[-softplus(-t)] - E_neg[softplus(t)],

which equals ``-2 ln 2`` when positives and negatives are indistinguishable
and approaches 0 as the discriminator separates them perfectly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

LN2 = math.log(2.0)


# -- estimators -----------------------------------------------------------------
def estimate_js_mi(pos_scores, neg_scores, pos_weights=None, neg_weights=None) -> Tensor:
    """Jensen-Shannon MI estimate from discriminator scores (nats).

    Optional weights replace the plain means with weighted sums (each set of
    weights should sum to one).
    """
    pos = pos_scores if isinstance(pos_scores, Tensor) else Tensor(np.asarray(pos_scores, dtype=np.float64))
    neg = neg_scores if isinstance(neg_scores, Tensor) else Tensor(np.asarray(neg_scores, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise ContractError("JS estimate needs at least one positive and one negative score")
    pos_term = -T.softplus(-pos)
    neg_term = T.softplus(neg)
    pos_mean = pos_term.mean() if pos_weights is None else (pos_term * pos_weights).sum()
    neg_mean = neg_term.mean() if neg_weights is None else (neg_term * neg_weights).sum()
    return pos_mean - neg_mean


def estimate_local_mi(pos_maps: Tensor, neg_maps: Tensor) -> Tensor:
    """Average over voxels of the per-voxel JS estimate, for ``[K, H, W]`` score maps."""
    if pos_maps.shape[-2:] != neg_maps.shape[-2:]:
        raise ContractError(f"score maps differ spatially: {pos_maps.shape} vs {neg_maps.shape}")
    return estimate_js_mi(pos_maps.flatten(), neg_maps.flatten())


def local_mi_per_voxel(pos_maps: np.ndarray, neg_maps: np.ndarray) -> float:
    """Reference form: estimate at each voxel across the batch, then average."""
    pos = np.asarray(pos_maps).reshape(-1, *np.shape(pos_maps)[-2:])
    neg = np.asarray(neg_maps).reshape(-1, *np.shape(neg_maps)[-2:])
    h, w = pos.shape[-2:]
    total = 0.0
    for r in range(h):
        for c in range(w):
            total += estimate_js_mi(pos[:, r, c], neg[:, r, c]).item()
    return total / (h * w)


# -- discriminators ---------------------------------------------------------------
def _flat(views: Tensor) -> Tensor:
    return views.reshape(views.shape[0], -1)


def project(collab, params) -> Tensor:
    """Linear encoding of collaborative views: ``[E, H, W, C]`` (or one ``[H, W, C]``) -> ``[E, d]``."""
    data = collab.data if hasattr(collab, "origin") else collab
    single = data.ndim == 3
    x = data.reshape(1, -1) if single else _flat(data)
    w = params["disc.proj.w"]
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"projection expects {w.shape[0]} inputs, view flattens to {x.shape[1]}")
    out = T.linear(x, w, params["disc.proj.b"])
    return out.reshape(-1) if single else out


def score_global(individual: Tensor, projected: Tensor, params) -> Tensor:
    """Scores ``[K]`` for individual views ``[K, H, W, C]`` paired with projected fused views ``[K, d]``."""
    x = T.concat([_flat(individual), projected], axis=1)
    if x.shape[1] != params["disc.g1.w"].shape[0]:
        raise DimensionError(f"global discriminator expects {params['disc.g1.w'].shape[0]} inputs, got {x.shape[1]}")
    x = T.relu(T.linear(x, params["disc.g1.w"], params["disc.g1.b"]))
    x = T.relu(T.linear(x, params["disc.g2.w"], params["disc.g2.b"]))
    return T.linear(x, params["disc.g3.w"], params["disc.g3.b"]).reshape(-1)


def score_local(individual: Tensor, projected: Tensor, params) -> Tensor:
    """Score maps ``[K, H, W]``: 1x1 stack over ``[F(k), projected]`` at every voxel ``k``.

    The first layer's weight is split into the voxel part and the projected
    part, which is applied once per pair and broadcast over the grid.
    """
    k, h, w, c = individual.shape
    w1 = params["disc.l1.w"]
    if w1.shape[0] != c + projected.shape[-1]:
        raise DimensionError(f"local discriminator expects {w1.shape[0]} inputs per voxel, got {c + projected.shape[-1]}")
    voxel_part = T.matmul(individual, w1[:c])
    pair_part = T.linear(projected, w1[c:], params["disc.l1.b"]).reshape(k, 1, 1, -1)
    hidden = T.relu(voxel_part + pair_part)
    return T.linear(hidden, params["disc.l2.w"], params["disc.l2.b"]).reshape(k, h, w)


def score_global_pair(individual, collab, params) -> Tensor:
    """Single-pair convenience form taking two feature maps; returns a scalar tensor."""
    ind = individual.data if hasattr(individual, "origin") else individual
    col = collab.data if hasattr(collab, "origin") else collab
    return score_global(ind.reshape(1, *ind.shape), project(col, params).reshape(1, -1), params).reshape(())


def score_local_pair(individual, collab, params) -> Tensor:
    ind = individual.data if hasattr(individual, "origin") else individual
    col = collab.data if hasattr(collab, "origin") else collab
    return score_local(ind.reshape(1, *ind.shape), project(col, params).reshape(1, -1), params).reshape(*ind.shape[:2])


# -- pairs ----------------------------------------------------------------------
@dataclass(frozen=True)
class SceneViews:
    """Aligned views ``aligned[ego][sender]`` and fused views ``collab[ego]`` of one scene."""

    scene_id: int
    aligned: tuple
    collab: tuple

    @property
    def n_agents(self) -> int:
        return len(self.aligned)


@dataclass(frozen=True)
class PairBatch:
    """Positive and negative pairs for one ego index.

    Entry ``k`` of ``positives`` and ``negatives`` share the fused view and the
    sender index ``senders[k]``; ``slots[k]`` is the position of the positive
    scene in ``scene_ids``.
    """

    ego: int
    positives: tuple
    negatives: tuple
    senders: tuple
    slots: tuple
    scene_ids: tuple
    negative_scene_ids: tuple


def sample_pairs(batch_scenes, negative_scenes, ego: int, seed: int = 0) -> PairBatch:
    """Build ``N`` positive and ``N`` negative pairs per scene for ``ego``.

    Each positive scene is matched to a distinct negative scene by a seeded
    permutation. When the negative scene has fewer agents, ego and sender
    indices wrap around its agent count.
    """
    ids = [v.scene_id for v in batch_scenes]
    neg_ids = [v.scene_id for v in negative_scenes]
    shared = set(ids) & set(neg_ids)
    if shared:
        raise ContractError(f"positive and negative scene sets overlap on ids {sorted(shared)}")
    if len(negative_scenes) < len(batch_scenes):
        raise ContractError(f"need at least {len(batch_scenes)} negative scenes, got {len(negative_scenes)}")
    perm = np.random.default_rng(seed).permutation(len(negative_scenes))
    pos, neg, senders, slots, used = [], [], [], [], []
    for b, views in enumerate(batch_scenes):
        if ego >= views.n_agents:
            raise ContractError(f"scene {views.scene_id} has no agent {ego}")
        other = negative_scenes[perm[b]]
        used.append(other.scene_id)
        collab = views.collab[ego]
        for j in range(views.n_agents):
            pos.append((views.aligned[ego][j], collab))
            neg.append((other.aligned[ego % other.n_agents][j % other.n_agents], collab))
            senders.append(j)
            slots.append(b)
    return PairBatch(ego, tuple(pos), tuple(neg), tuple(senders), tuple(slots), tuple(ids), tuple(used))


def _stack_data(items):
    return T.stack([it.data if hasattr(it, "origin") else it for it in items])


def pair_batch_scores(pairs: PairBatch, params, local: bool = True):
    """Global scores ``(pos[K], neg[K])`` and, if requested, local maps ``(pos[K,H,W], neg[K,H,W])``."""
    collab = _stack_data([p[1] for p in pairs.positives])
    proj = project(collab, params)
    pos_ind = _stack_data([p[0] for p in pairs.positives])
    neg_ind = _stack_data([p[0] for p in pairs.negatives])
    g = (score_global(pos_ind, proj, params), score_global(neg_ind, proj, params))
    if not local:
        return g, None
    return g, (score_local(pos_ind, proj, params), score_local(neg_ind, proj, params))


def mvmi_objective(pair_batches, params, beta_g: float, beta_l: float):
    """``(L_GMI, L_LMI, combined)`` averaged over the given per-ego pair batches.

    For each ego, the estimate is taken per sender over the scenes, then
    averaged over senders; ``combined = beta_g * (-L_GMI) + beta_l * (-L_LMI)``.
    """
    if isinstance(pair_batches, PairBatch):
        pair_batches = [pair_batches]
    g_terms, l_terms = [], []
    for pb in pair_batches:
        (gp, gn), loc = pair_batch_scores(pb, params, local=beta_l != 0)
        senders = np.asarray(pb.senders)
        g_est, l_est = [], []
        for j in sorted(set(pb.senders)):
            idx = np.flatnonzero(senders == j)
            g_est.append(estimate_js_mi(T.take(gp, idx), T.take(gn, idx)))
            if loc is not None:
                l_est.append(estimate_local_mi(T.take(loc[0], idx), T.take(loc[1], idx)))
        g_terms.append(T.stack(g_est).mean())
        if l_est:
            l_terms.append(T.stack(l_est).mean())
    l_gmi = -T.stack(g_terms).mean()
    l_lmi = -T.stack(l_terms).mean() if l_terms else Tensor(0.0)
    combined = l_gmi * (-beta_g) + l_lmi * (-beta_l)
    return l_gmi, l_lmi, combined


def batch_mi_losses(pos_views: Tensor, neg_views: Tensor, collab: Tensor, collab_index, pair_weights, params, local: bool = True):
    """Vectorised ``(L_GMI, L_LMI)`` over many egos at once.

    ``pos_views[P]``/``neg_views[P]`` are the individual halves of the pairs,
    ``collab[E]`` the fused views, ``collab_index[P]`` maps pairs to fused
    views and ``pair_weights[P]`` (summing to one) averages per-pair terms
    over senders and egos.
    """
    proj = T.take(project(collab, params), collab_index, axis=0)
    wts = Tensor(np.asarray(pair_weights, dtype=np.float64))
    l_gmi = -estimate_js_mi(score_global(pos_views, proj, params), score_global(neg_views, proj, params), wts, wts)
    if not local:
        return l_gmi, Tensor(0.0)
    h, w = pos_views.shape[1:3]
    vox = Tensor(np.repeat(np.asarray(pair_weights, dtype=np.float64), h * w) / (h * w))
    pos_l = score_local(pos_views, proj, params).flatten()
    neg_l = score_local(neg_views, proj, params).flatten()
    l_lmi = -estimate_js_mi(pos_l, neg_l, vox, vox)
    return l_gmi, l_lmi


def init_zero_final(params, which: str = "both"):
    """Copy of ``params`` with the last discriminator layer(s) zeroed (scores identically 0)."""
    updates = {}
    if which in ("both", "global"):
        updates["disc.g3.w"] = T.parameter(np.zeros(params["disc.g3.w"].shape))
        updates["disc.g3.b"] = T.parameter(np.zeros(params["disc.g3.b"].shape))
    if which in ("both", "local"):
        updates["disc.l2.w"] = T.parameter(np.zeros(params["disc.l2.w"].shape))
        updates["disc.l2.b"] = T.parameter(np.zeros(params["disc.l2.b"].shape))
    return params.replaced(updates)
