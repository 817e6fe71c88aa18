"""Batched forward passes over several scenes at once.

All agents of all scenes in a batch are encoded as one stack. Pair ``p``
stands for (scene, ego ``i``, sender ``j``); pairs are ordered by scene,
then ego, then sender, so each ego's senders form one contiguous group.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .network import compress_batch, decode_batch, decompress_batch, encode_batch, feature_transform, fuse_batch
from .tensor import Tensor
from .warp import warp_matrix


@dataclass
class PairLayout:
    scene: np.ndarray  # scene position in the batch, per pair
    ego: np.ndarray  # ego agent index within its scene
    sender: np.ndarray
    ego_row: np.ndarray  # row of the ego in the encoded stack
    group_sizes: list  # pairs per (scene, ego), in order
    offsets: list  # first stack row of each scene

    @property
    def n_groups(self) -> int:
        return len(self.group_sizes)


def stack_offsets(datas) -> list:
    return list(np.concatenate([[0], np.cumsum([d.n_agents for d in datas])[:-1]]).astype(int))


def pair_layout(datas) -> PairLayout:
    offsets = stack_offsets(datas)
    scene, ego, sender, ego_row, sizes = [], [], [], [], []
    for b, d in enumerate(datas):
        n = d.n_agents
        for i in range(n):
            sizes.append(n)
            for j in range(n):
                scene.append(b)
                ego.append(i)
                sender.append(j)
                ego_row.append(offsets[b] + i)
    as_int = lambda v: np.asarray(v, dtype=np.intp)  # noqa: E731
    return PairLayout(as_int(scene), as_int(ego), as_int(sender), as_int(ego_row), sizes, offsets)


def encode_scenes(datas, params, bev_override=None) -> Tensor:
    bev = np.concatenate([d.bev for d in datas]) if bev_override is None else bev_override
    return encode_batch(Tensor(bev), params)


def align(features: Tensor, datas, layout: PairLayout, resolution: float, params, sender_poses=None) -> Tensor:
    """Warp every sender's view into its ego's frame.

    Views from other agents pass through compression; an ego's own view does
    not. ``sender_poses[b][j]`` overrides the pose agent ``j`` of scene ``b``
    advertises (used for localisation noise).
    """
    s = features.shape[0]
    transmitted = decompress_batch(compress_batch(features, params), params)
    compressed = transmitted is not features
    source = T.concat([features, transmitted], axis=0) if compressed else features
    transforms, sources = [], []
    for b, i, j in zip(layout.scene, layout.ego, layout.sender):
        scene = datas[b].scene
        ego_pose = scene.agents[i]
        if i == j:
            pose = ego_pose
        else:
            pose = scene.agents[j] if sender_poses is None else sender_poses[b][j]
        transforms.append(feature_transform(pose, ego_pose, resolution))
        row = layout.offsets[b] + j
        sources.append(row + s if compressed and i != j else row)
    h, w, c = features.shape[1:]
    matrix = warp_matrix(h, w, transforms, sources, n_sources=source.shape[0])
    return T.sparse_apply(matrix, source, (len(transforms), h, w, c))


@dataclass
class BatchForward:
    features: Tensor
    aligned: Tensor
    fused: Tensor
    weights: Tensor
    cls_logits: Tensor
    reg: Tensor
    layout: PairLayout


def forward_intermediate(datas, params, resolution: float, sender_poses=None, features=None) -> BatchForward:
    """Encode, align, fuse and decode for every agent of every scene as ego."""
    layout = pair_layout(datas)
    feats = encode_scenes(datas, params) if features is None else features
    aligned = align(feats, datas, layout, resolution, params, sender_poses)
    ego_views = T.take(feats, layout.ego_row, axis=0)
    fused, weights = fuse_batch(aligned, ego_views, layout.group_sizes, params)
    cls, reg = decode_batch(fused, params)
    return BatchForward(feats, aligned, fused, weights, cls, reg, layout)


def forward_single(bev: np.ndarray, params):
    """Single-agent pipeline on a stack of BEV grids: (cls logits, regression)."""
    return decode_batch(encode_batch(Tensor(bev), params), params)


def stacked_labels(datas):
    fg = np.stack([lab.foreground for d in datas for lab in d.labels])
    reg = np.stack([lab.regression for d in datas for lab in d.labels])
    return fg, reg


def negative_layout(layout: PairLayout, datas, negatives) -> PairLayout:
    """Layout matching each positive pair (b, i, j) with (b, i mod N', j mod N') in ``negatives[b]``."""
    n_neg = np.array([negatives[b].n_agents for b in range(len(datas))])
    counts = n_neg[layout.scene]
    offsets = stack_offsets(negatives)
    ego = layout.ego % counts
    return PairLayout(
        layout.scene.copy(),
        ego,
        layout.sender % counts,
        np.asarray(offsets, dtype=np.intp)[layout.scene] + ego,
        list(layout.group_sizes),
        offsets,
    )


def nearest_warp(grid: np.ndarray, transform) -> np.ndarray:
    """Nearest-neighbour resampling of an ``[H, W, C]`` grid; out-of-range reads are zero."""
    h, w = grid.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w]
    pts = np.stack([cols.ravel() - (w - 1) / 2.0, rows.ravel() - (h - 1) / 2.0], axis=1)
    src = transform.inverse().apply(pts)
    sc = np.floor(src[:, 0] + (w - 1) / 2.0 + 0.5).astype(np.intp)
    sr = np.floor(src[:, 1] + (h - 1) / 2.0 + 0.5).astype(np.intp)
    ok = (sc >= 0) & (sc < w) & (sr >= 0) & (sr < h)
    out = np.zeros((h * w,) + grid.shape[2:], dtype=grid.dtype)
    out[ok] = grid[sr[ok], sc[ok]]
    return out.reshape(grid.shape)


def early_bev(data, ego: int, resolution: float, sender_poses=None) -> np.ndarray:
    """Elementwise max of every agent's BEV grid resampled into the ego's frame."""
    ego_pose = data.scene.agents[ego]
    out = np.array(data.bev[ego])
    for j in range(data.n_agents):
        if j == ego:
            continue
        pose = data.scene.agents[j] if sender_poses is None else sender_poses[j]
        np.maximum(out, nearest_warp(data.bev[j], feature_transform(pose, ego_pose, resolution)), out=out)
    return out


def early_stack(datas, resolution: float, sender_poses=None) -> np.ndarray:
    return np.stack([
        early_bev(d, i, resolution, None if sender_poses is None else sender_poses[b])
        for b, d in enumerate(datas) for i in range(d.n_agents)
    ])
