"""Collaborative perception network: encoder, pose alignment, weighted fusion, decoder.

Parameters live in a flat name -> :class:`Tensor` mapping (:class:`NetworkParams`).
Batched functions (``*_batch``) work on stacked ``[B, H, W, C]`` tensors and
are what the trainer uses; the single-view functions wrap them with the
:class:`FeatureMap` bookkeeping.
"""
from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .geometry import SE2, iou_matrix, relative_pose
from .scene import GridConfig
from .tensor import Tensor
from .warp import warp_matrix


@dataclass(frozen=True)
class NetworkConfig:
    bev_channels: int = 4
    enc_hidden: int = 16
    feature_channels: int = 32
    col_hidden: int = 32
    dec_channels: tuple = (16, 16)
    proj_dim: int = 64
    global_hidden: int = 128
    local_hidden: int = 64
    compress_denominator: int = 1
    score_threshold: float = 0.5
    nms_iou: float = 0.1

    def transmitted_channels(self) -> int:
        return compressed_channels(self.feature_channels, self.compress_denominator)


def compressed_channels(channels: int, denominator: int) -> int:
    if denominator < 1 or denominator & (denominator - 1):
        raise ContractError(f"compression denominator must be a power of two, got {denominator}")
    if channels % denominator:
        raise ContractError(f"{channels} feature channels are not divisible by compression denominator {denominator}")
    return channels // denominator


# -- parameters -----------------------------------------------------------
_CKPT_MAGIC = b"CLMI"
_CKPT_VERSION = 1
CMIMNET_PREFIX = "disc."


class NetworkParams:
    """Named trainable tensors plus JSON-serialisable metadata."""

    def __init__(self, tensors: dict, meta: dict | None = None):
        self.tensors = dict(tensors)
        self.meta = dict(meta or {})

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def names(self, group: str | None = None) -> list:
        """Parameter names; ``group`` is ``"pipeline"`` or ``"cmimnet"``."""
        names = list(self.tensors)
        if group == "cmimnet":
            return [n for n in names if n.startswith(CMIMNET_PREFIX)]
        if group == "pipeline":
            return [n for n in names if not n.startswith(CMIMNET_PREFIX)]
        return names

    def replaced(self, updates: dict) -> "NetworkParams":
        merged = dict(self.tensors)
        merged.update(updates)
        return NetworkParams(merged, self.meta)

    def arrays(self) -> dict:
        return {k: np.array(v.data) for k, v in self.tensors.items()}

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        meta = json.dumps(self.meta, sort_keys=True).encode()
        buf.write(_CKPT_MAGIC)
        buf.write(struct.pack("<II", _CKPT_VERSION, len(meta)))
        buf.write(meta)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name in sorted(self.tensors):
            data = np.ascontiguousarray(self.tensors[name].data, dtype="<f8")
            raw = name.encode()
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", data.ndim))
            buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
            buf.write(data.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NetworkParams":
        if blob[:4] != _CKPT_MAGIC:
            raise ContractError("not a parameter checkpoint")
        version, meta_len = struct.unpack_from("<II", blob, 4)
        if version != _CKPT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(blob[pos : pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            tensors[name] = T.parameter(data)
        return cls(tensors, meta)

    def save(self, path) -> None:
        """Atomic write: temp file in the target directory, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".ckpt")
        with os.fdopen(fd, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "NetworkParams":
        return cls.from_bytes(Path(path).read_bytes())


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_params(config: NetworkConfig, grid: GridConfig, rng, with_discriminators: bool = True) -> NetworkParams:
    """He-normal weights, zero biases. Discriminator tensors carry the ``disc.`` prefix."""
    cb, c1, c = config.bev_channels, config.enc_hidden, config.feature_channels
    d1, d2 = config.dec_channels
    p = {}

    def conv(name, k, cin, cout):
        p[name + ".w"] = _he(rng, (k, k, cin, cout), k * k * cin)
        p[name + ".b"] = np.zeros(cout)

    def dense(name, nin, nout):
        p[name + ".w"] = _he(rng, (nin, nout), nin)
        p[name + ".b"] = np.zeros(nout)

    conv("enc.conv1", 3, cb, c1)
    conv("enc.conv2", 3, c1, c)
    conv("enc.conv3", 3, c, c)
    conv("col.conv1", 1, 2 * c, config.col_hidden)
    conv("col.conv2", 1, config.col_hidden, 1)
    conv("dec.conv1", 3, c, d1)
    conv("dec.conv2", 3, d1, d2)
    conv("head.cls", 1, d2, 1)
    conv("head.reg", 1, d2, 4)
    if config.compress_denominator > 1:
        k = config.transmitted_channels()
        conv("comp.down", 1, c, k)
        conv("comp.up", 1, k, c)
    if with_discriminators:
        fh = fw = grid.size // 2
        flat = fh * fw * c
        dense("disc.proj", flat, config.proj_dim)
        dense("disc.g1", flat + config.proj_dim, config.global_hidden)
        dense("disc.g2", config.global_hidden, config.global_hidden)
        dense("disc.g3", config.global_hidden, 1)
        dense("disc.l1", c + config.proj_dim, config.local_hidden)
        dense("disc.l2", config.local_hidden, 1)
    meta = {"network": _config_dict(config), "grid": _config_dict(grid)}
    return NetworkParams({k: T.parameter(v) for k, v in p.items()}, meta)


def _config_dict(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.__dict__.items()}


def network_config_from(params: NetworkParams) -> NetworkConfig:
    d = dict(params.meta["network"])
    d["dec_channels"] = tuple(d["dec_channels"])
    return NetworkConfig(**d)


def grid_config_from(params: NetworkParams) -> GridConfig:
    return GridConfig(**params.meta["grid"])


# -- feature maps ------------------------------------------------------------
@dataclass(frozen=True)
class FeatureMap:
    """A ``[H, W, C]`` view; ``frame`` is the agent whose axes it uses, ``agent`` its source."""

    data: Tensor
    frame: int
    origin: str = "individual"
    agent: int | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DimensionError(f"feature map must be [H, W, C], got {self.data.shape}")
        if self.origin not in ("individual", "aligned", "collaborative"):
            raise ContractError(f"unknown feature origin {self.origin!r}")
        if self.agent is None:
            object.__setattr__(self, "agent", self.frame)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class WeightMap:
    data: Tensor
    sender: int
    ego: int


@dataclass
class DetectionOutput:
    cls: Tensor | None
    reg: Tensor | None
    boxes: np.ndarray
    scores: np.ndarray
    cls_logits: Tensor | None = None


def _conv(x, params, name, stride=1, act=True):
    y = T.conv2d(x, params[name + ".w"], params[name + ".b"], stride=stride)
    return T.relu(y) if act else y


# -- encoder --------------------------------------------------------------------
def encode_batch(bev: Tensor, params) -> Tensor:
    """``[B, Hb, Wb, Cb]`` occupancy -> ``[B, Hb/2, Wb/2, C]`` features."""
    x = _conv(bev, params, "enc.conv1")
    x = _conv(x, params, "enc.conv2", stride=2)
    return _conv(x, params, "enc.conv3")


def encode(bev, params, agent: int = 0) -> FeatureMap:
    occ = bev.occupancy if hasattr(bev, "occupancy") else bev
    occ = occ.data if isinstance(occ, Tensor) else np.asarray(occ)
    expected = params["enc.conv1.w"].shape[2]
    if occ.ndim != 3 or occ.shape[-1] != expected:
        raise DimensionError(f"BEV must be [H, W, {expected}], got {occ.shape}")
    return FeatureMap(encode_batch(Tensor(occ[None]), params).reshape(occ.shape[0] // 2, occ.shape[1] // 2, -1), agent)


def compress_batch(features: Tensor, params) -> Tensor:
    """Sender side: learned 1x1 channel reduction (identity without compression weights)."""
    if "comp.down.w" not in params:
        return features
    return _conv(features, params, "comp.down", act=False)


def decompress_batch(payload: Tensor, params) -> Tensor:
    if "comp.up.w" not in params:
        return payload
    return _conv(payload, params, "comp.up", act=False)


# -- alignment ------------------------------------------------------------------
def feature_transform(sender_pose: SE2, ego_pose: SE2, resolution: float) -> SE2:
    """Sender-grid -> ego-grid motion in voxel units."""
    return relative_pose(ego_pose, sender_pose).scaled(1.0 / resolution)


def warp_to_ego(feature: FeatureMap, sender_pose: SE2, ego_pose: SE2, resolution: float, ego: int | None = None) -> FeatureMap:
    if feature.origin != "individual":
        raise ContractError(f"warp_to_ego expects an individual view, got {feature.origin!r}")
    h, w, c = feature.shape
    m = warp_matrix(h, w, [feature_transform(sender_pose, ego_pose, resolution)])
    out = T.sparse_apply(m, feature.data, (h, w, c))
    return FeatureMap(out, feature.frame if ego is None else ego, "aligned", feature.agent)


# -- collaboration encoder ----------------------------------------------------------
def collab_logits_batch(aligned: Tensor, ego: Tensor, params) -> Tensor:
    """Per-voxel importance logits ``[P, H, W, 1]`` for (aligned view, ego view) pairs."""
    if aligned.shape != ego.shape:
        raise DimensionError(f"aligned view {aligned.shape} and ego view {ego.shape} differ")
    x = T.concat([aligned, ego], axis=-1)
    x = _conv(x, params, "col.conv1")
    return _conv(x, params, "col.conv2", act=False)


def collab_weights(aligned: FeatureMap, ego: FeatureMap, params) -> WeightMap:
    """Pre-normalisation logit map ``[H, W, 1]`` for one sender."""
    if aligned.shape != ego.shape:
        raise DimensionError(f"aligned view {aligned.shape} and ego view {ego.shape} differ")
    logits = collab_logits_batch(aligned.data.reshape(1, *aligned.shape), ego.data.reshape(1, *ego.shape), params)
    return WeightMap(logits.reshape(*aligned.shape[:2], 1), aligned.agent, ego.frame)


def fuse_batch(aligned: Tensor, ego_views: Tensor, group_sizes, params):
    """Fuse consecutive groups of aligned views.

    ``aligned[P]`` holds each ego's senders contiguously (in agent order);
    ``ego_views[P]`` repeats the ego's own view for every row of its group.
    Returns ``(fused[E], weights[P])`` with weights softmax-normalised per group.
    """
    logits = collab_logits_batch(aligned, ego_views, params)
    weights = T.segment_softmax(logits, group_sizes)
    fused = T.segment_sum(weights * aligned, group_sizes)
    return fused, weights


def fuse(ego: FeatureMap, aligned_views, params, return_weights: bool = False):
    """Per-voxel softmax-weighted sum of the aligned views (ego's own view included)."""
    views = sorted(aligned_views, key=lambda v: v.agent)
    if not views:
        raise ContractError("fuse needs at least one view")
    shape = ego.shape
    for v in views:
        if v.shape != shape:
            raise DimensionError(f"view from agent {v.agent} has shape {v.shape}, ego has {shape}")
    stacked = T.stack([v.data for v in views])
    ego_rep = T.stack([ego.data] * len(views))
    fused, weights = fuse_batch(stacked, ego_rep, [len(views)], params)
    out = FeatureMap(fused.reshape(*shape), ego.frame, "collaborative", ego.frame)
    if not return_weights:
        return out
    maps = [WeightMap(weights[k], v.agent, ego.frame) for k, v in enumerate(views)]
    return out, maps


# -- decoder and heads ------------------------------------------------------------
def decode_batch(features: Tensor, params):
    """``[E, h, w, C]`` -> (cls logits ``[E, 2h, 2w]``, regression ``[E, 2h, 2w, 4]``)."""
    x = _conv(features, params, "dec.conv1")
    x = T.upsample_nearest(x, 2)
    x = _conv(x, params, "dec.conv2")
    cls = _conv(x, params, "head.cls", act=False)
    reg = _conv(x, params, "head.reg", act=False)
    return cls.reshape(cls.shape[:-1]), reg


def decode_boxes(cls: np.ndarray, reg: np.ndarray, grid: GridConfig, threshold: float):
    """Boxes ``(x1, y1, x2, y2)`` and scores at voxels with ``cls >= threshold``."""
    rows, cols = np.nonzero(cls >= threshold)
    if rows.size == 0:
        return np.zeros((0, 4)), np.zeros(0)
    vx = (cols + 0.5) * grid.resolution - grid.half_extent
    vy = (rows + 0.5) * grid.resolution - grid.half_extent
    r = reg[rows, cols]
    cx, cy = vx + r[:, 0], vy + r[:, 1]
    w, length = np.exp(np.clip(r[:, 2], -8, 8)), np.exp(np.clip(r[:, 3], -8, 8))
    boxes = np.stack([cx - w / 2, cy - length / 2, cx + w / 2, cy + length / 2], axis=1)
    return boxes, cls[rows, cols].copy()


def nms(boxes, scores, iou_threshold: float):
    """Greedy suppression; returns kept indices in descending-score order.

    Order ties break on the box coordinates (x1, y1, x2, y2), ascending.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(scores)):
        raise ContractError("nms needs finite scores")
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.intp)
    order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.array(keep, dtype=np.intp)


def heads_to_detections(cls_logits: Tensor, reg: Tensor, grid: GridConfig, threshold: float, iou: float) -> DetectionOutput:
    cls = T.sigmoid(cls_logits)
    boxes, scores = decode_boxes(cls.data, reg.data, grid, threshold)
    keep = nms(boxes, scores, iou)
    return DetectionOutput(cls, reg, boxes[keep], scores[keep], cls_logits)


def decode_and_head(collab: FeatureMap, params, grid: GridConfig | None = None, threshold: float | None = None, iou: float | None = None) -> DetectionOutput:
    if collab.origin not in ("collaborative", "individual"):
        raise ContractError(f"decode_and_head expects a collaborative or individual view, got {collab.origin!r}")
    cfg = network_config_from(params) if "network" in params.meta else NetworkConfig()
    grid = grid or (grid_config_from(params) if "grid" in params.meta else GridConfig())
    threshold = cfg.score_threshold if threshold is None else threshold
    iou = cfg.nms_iou if iou is None else iou
    logits, reg = decode_batch(collab.data.reshape(1, *collab.shape), params)
    return heads_to_detections(logits.reshape(logits.shape[1:]), reg.reshape(reg.shape[1:]), grid, threshold, iou)


# -- heatmap export -------------------------------------------------------------------
def weight_heatmap_csv(weights: WeightMap | np.ndarray) -> str:
    data = weights.data.data if isinstance(weights, WeightMap) else np.asarray(weights)
    data = data.reshape(data.shape[0], data.shape[1])
    return "\n".join(",".join(repr(float(v)) for v in row) for row in data) + "\n"
