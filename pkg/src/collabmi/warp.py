"""Bilinear resampling of feature grids under a rigid planar motion.

Grid coordinates are voxel units with the origin at the grid centre:
column ``c`` sits at ``x = c - (W - 1) / 2`` and row ``r`` at
``y = r - (H - 1) / 2``. The warp is linear in the feature values, so it is
stored as a sparse matrix; several warps of a feature stack are applied
with one block matrix.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError
from .geometry import SE2
from .tensor import Tensor, sparse_apply


def _bilinear_entries(h: int, w: int, transform: SE2):
    """Rows, columns and weights of the (h*w, h*w) resampling matrix."""
    inv = transform.inverse()
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px, py = cc.ravel() - cx, rr.ravel() - cy
    c, s = math.cos(inv.yaw), math.sin(inv.yaw)
    sx = c * px - s * py + inv.x + cx
    sy = s * px + c * py + inv.y + cy
    c0, r0 = np.floor(sx), np.floor(sy)
    fc, fr = sx - c0, sy - r0
    c0, r0 = c0.astype(np.intp), r0.astype(np.intp)
    out_idx = np.arange(h * w)
    rows, cols, vals = [], [], []
    for dr, dc, wt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rs, cs = r0 + dr, c0 + dc
        keep = (rs >= 0) & (rs < h) & (cs >= 0) & (cs < w) & (wt != 0)
        rows.append(out_idx[keep])
        cols.append(rs[keep] * w + cs[keep])
        vals.append(wt[keep])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def warp_matrix(h: int, w: int, transforms, sources=None, n_sources=None) -> sp.csr_matrix:
    """Block resampling matrix: output block ``p`` reads input block ``sources[p]``."""
    transforms = list(transforms)
    sources = list(range(len(transforms))) if sources is None else list(sources)
    n_sources = (max(sources) + 1 if sources else 0) if n_sources is None else n_sources
    hw = h * w
    rows, cols, vals = [], [], []
    for p, (tf, src) in enumerate(zip(transforms, sources)):
        r, c, v = _bilinear_entries(h, w, tf)
        rows.append(r + p * hw)
        cols.append(c + src * hw)
        vals.append(v)
    if rows:
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(transforms) * hw, n_sources * hw))


def bilinear_warp(feature: Tensor, transform: SE2) -> Tensor:
    """Resample ``feature[H, W, C]`` so that ``out(p) = feature(transform⁻¹ p)``.

    ``transform`` is in voxel units. Samples falling outside the grid read
    zero. Gradients reach ``feature`` only.
    """
    if feature.ndim != 3:
        raise DimensionError(f"bilinear_warp expects [H, W, C], got {feature.shape}")
    h, w, c = feature.shape
    return sparse_apply(warp_matrix(h, w, [transform]), feature, (h, w, c))


def warp_stack(features: Tensor, transforms, sources) -> Tensor:
    """Warp ``features[S, H, W, C]``: output ``p`` is ``features[sources[p]]`` moved by ``transforms[p]``."""
    if features.ndim != 4:
        raise DimensionError(f"warp_stack expects [S, H, W, C], got {features.shape}")
    sources = list(sources)
    n, h, w, c = features.shape
    matrix = warp_matrix(h, w, transforms, sources, n_sources=n)
    return sparse_apply(matrix, features, (len(sources), h, w, c))
