"""Baselines, average precision, bandwidth accounting and robustness sweeps."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .geometry import SE2, iou_matrix, relative_pose, transform_box
from .network import (
    DetectionOutput,
    FeatureMap,
    NetworkParams,
    compress_batch,
    compressed_channels,
    decode_and_head,
    decode_batch,
    encode,
    encode_batch,
    heads_to_detections,
    nms,
    network_config_from,
)
from .pipeline import early_bev, forward_intermediate
from .scene import GridConfig
from .tensor import Tensor

MESSAGE_FEATURE_DIMS = (32, 32, 256)
FLOAT_BYTES = 4
KINDS = ("none", "early", "late", "intermediate")
SWEEP_FIELDS = ("mode", "ratio_denominator", "noise_std", "seed", "ap50", "ap70", "comm_bytes")


# -- bandwidth -------------------------------------------------------------------------
def ratio_denominator(ratio) -> int:
    """``1/2^n`` -> ``2^n``; integers are taken as the denominator itself."""
    if isinstance(ratio, int) and not isinstance(ratio, bool):
        den = ratio
    else:
        frac = Fraction(ratio).limit_denominator(1 << 16)
        if frac <= 0 or frac.numerator != 1 or float(frac) != float(ratio):
            raise ConfigError("ratio", f"compression ratio must be 1/2^n, got {ratio}")
        den = frac.denominator
    if den < 1 or den & (den - 1):
        raise ConfigError("ratio", f"compression denominator must be a power of two, got {den}")
    return den


def comm_volume(feature_dims=MESSAGE_FEATURE_DIMS, bytes_per_value: int = FLOAT_BYTES, ratio=1, senders: int = 1) -> int:
    """Bytes sent by ``senders`` agents each transmitting one compressed feature map."""
    h, w, c = feature_dims
    den = ratio_denominator(ratio)
    if c % den:
        raise ConfigError("ratio", f"{c} channels are not divisible by compression denominator {den}")
    if senders < 0:
        raise ConfigError("senders", "must be non-negative")
    return senders * h * w * (c // den) * bytes_per_value


def early_message_bytes(points: np.ndarray) -> int:
    return int(len(points)) * 3 * FLOAT_BYTES


def late_message_bytes(n_boxes: int) -> int:
    return int(n_boxes) * 5 * FLOAT_BYTES  # four coordinates and a score


# -- modes and noise ---------------------------------------------------------------------
@dataclass(frozen=True)
class CollabMode:
    kind: str
    ratio_denominator: int = 1
    noise_std: float = 0.0
    variant: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError("mode.kind", f"unknown collaboration mode {self.kind!r}; expected one of {KINDS}")
        ratio_denominator(self.ratio_denominator)
        if self.noise_std < 0:
            raise ConfigError("mode.noise_std", f"must be non-negative, got {self.noise_std}")

    @property
    def ratio(self) -> float:
        return 1.0 / self.ratio_denominator

    @property
    def label(self) -> str:
        return self.kind + (f"-{self.variant}" if self.variant else "")

    @property
    def checkpoint_key(self) -> str:
        """Which trained model the mode evaluates; late collaboration reuses the single-agent model."""
        if self.kind in ("none", "late"):
            return "none"
        if self.kind == "early":
            return "early"
        key = "intermediate" + (f"-{self.variant}" if self.variant else "")
        return key + (f"-r{self.ratio_denominator}" if self.ratio_denominator > 1 else "")


def inject_pose_noise(pose: SE2, std: float, rng) -> SE2:
    """Gaussian offset on x and y; the heading is left as is."""
    if std < 0:
        raise ContractError(f"noise std must be non-negative, got {std}")
    dx, dy = rng.standard_normal(2)
    if std == 0:
        return pose
    return SE2(pose.x + std * dx, pose.y + std * dy, pose.yaw)


def noisy_sender_poses(datas, std: float, seed: int) -> list:
    """One perturbed pose per (scene, agent); the draws do not depend on ``std``."""
    rng = np.random.default_rng([seed, 0x5EED])
    return [[inject_pose_noise(a, std, rng) for a in d.scene.agents] for d in datas]


# -- per-scene baselines -----------------------------------------------------------------
def _thresholds(params, grid):
    cfg = network_config_from(params) if "network" in params.meta else None
    return (cfg.score_threshold, cfg.nms_iou) if cfg else (0.5, 0.1)


def run_no_collab(data, ego: int, params: NetworkParams, grid: GridConfig = GridConfig()) -> DetectionOutput:
    return decode_and_head(encode(data.bev[ego], params, ego), params, grid)


def run_early_collab(data, ego: int, params: NetworkParams, grid: GridConfig = GridConfig(), sender_poses=None) -> DetectionOutput:
    bev = early_bev(data, ego, grid.resolution, sender_poses)
    return decode_and_head(encode(bev, params, ego), params, grid)


def _to_ego(boxes: np.ndarray, sender_pose: SE2, ego_pose: SE2) -> np.ndarray:
    rel = relative_pose(ego_pose, sender_pose)
    return np.array([transform_box(b, rel) for b in boxes]).reshape(-1, 4)


def run_late_collab(data, params: NetworkParams, ego: int = 0, grid: GridConfig = GridConfig(), sender_poses=None) -> DetectionOutput:
    """Every agent detects alone; boxes are moved into the ego frame and merged by NMS."""
    _, iou = _thresholds(params, grid)
    ego_pose = data.scene.agents[ego]
    boxes, scores = [], []
    for j in range(data.n_agents):
        out = run_no_collab(data, j, params, grid)
        if j == ego:
            boxes.append(out.boxes)
            scores.append(out.scores)
            continue
        pose = data.scene.agents[j] if sender_poses is None else sender_poses[j]
        moved = _to_ego(out.boxes, pose, ego_pose)
        # the ego reports only inside its own crop, where its ground truth lives
        cx, cy = (moved[:, 0] + moved[:, 2]) / 2, (moved[:, 1] + moved[:, 3]) / 2
        inside = (np.abs(cx) <= grid.half_extent) & (np.abs(cy) <= grid.half_extent)
        boxes.append(moved[inside])
        scores.append(out.scores[inside])
    pooled, pooled_scores = np.concatenate(boxes).reshape(-1, 4), np.concatenate(scores)
    keep = nms(pooled, pooled_scores, iou)
    return DetectionOutput(None, None, pooled[keep], pooled_scores[keep])


def run_intermediate(data, ego: int, params: NetworkParams, grid: GridConfig = GridConfig(), sender_poses=None) -> DetectionOutput:
    fwd = forward_intermediate([data], params, grid.resolution * 2, None if sender_poses is None else [sender_poses])
    threshold, iou = _thresholds(params, grid)
    return heads_to_detections(fwd.cls_logits[ego], fwd.reg[ego], grid, threshold, iou)


# -- compression ----------------------------------------------------------------------------
def compress(feature: FeatureMap, ratio, params: NetworkParams) -> Tensor:
    """Transmitted payload ``[H, W, C/2^n]``; ratio 1 sends the feature unchanged."""
    den = ratio_denominator(ratio)
    c = feature.shape[-1]
    compressed_channels(c, den)
    if den == 1:
        return feature.data
    if "comp.down.w" not in params or params["comp.down.w"].shape[-1] != c // den:
        raise ContractError(f"parameters carry no compressor for ratio 1/{den}")
    return compress_batch(feature.data.reshape(1, *feature.shape), params).reshape(*feature.shape[:2], c // den)


def decompress(payload: Tensor, ratio, params: NetworkParams, frame: int = 0, agent: int | None = None) -> FeatureMap:
    den = ratio_denominator(ratio)
    if den == 1:
        return FeatureMap(payload, frame, "individual", agent)
    out = T.conv2d(payload, params["comp.up.w"], params["comp.up.b"])
    return FeatureMap(out, frame, "individual", agent)


# -- average precision ------------------------------------------------------------------------
def match_detections(detections, ground_truth, iou_threshold: float):
    """Greedy global matching. Returns (scores, is_true_positive) in ranked order and the GT count."""
    entries = []
    for s, (boxes, scores) in enumerate(detections):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        for k, sc in enumerate(np.asarray(scores, dtype=np.float64).reshape(-1)):
            entries.append((-sc, s, k, boxes[k]))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    gts = [np.asarray(g, dtype=np.float64).reshape(-1, 4) for g in ground_truth]
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    scores, hits = [], []
    for neg_score, s, _, box in entries:
        hit = False
        if len(gts[s]):
            ious = iou_matrix(box[None], gts[s])[0]
            ious[used[s]] = -1.0
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                used[s][best] = True
                hit = True
        scores.append(-neg_score)
        hits.append(hit)
    return np.array(scores), np.array(hits, dtype=bool), sum(len(g) for g in gts)


def compute_ap(detections, ground_truth, iou_threshold: float) -> float:
    """All-point area under the interpolated precision-recall curve.

    ``detections[s] = (boxes[K, 4], scores[K])`` and ``ground_truth[s] = boxes[G, 4]``
    for every scene ``s``; matching requires IoU >= ``iou_threshold``.
    """
    if not 0 < iou_threshold < 1:
        raise ContractError(f"IoU threshold must lie in (0, 1), got {iou_threshold}")
    if len(detections) != len(ground_truth):
        raise ContractError(f"{len(detections)} detection sets for {len(ground_truth)} scenes")
    _, hits, n_gt = match_detections(detections, ground_truth, iou_threshold)
    if n_gt == 0:
        raise ContractError("average precision is undefined without ground-truth boxes")
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


# -- evaluation ----------------------------------------------------------------------------
@dataclass(frozen=True)
class EvalReport:
    mode: CollabMode
    ap50: float
    ap70: float
    comm_bytes: int
    seeds: tuple
    n_scenes: int
    per_seed: tuple = field(default=())

    def as_dict(self) -> dict:
        return {
            "mode": self.mode.label,
            "ratio_denominator": self.mode.ratio_denominator,
            "noise_std": self.mode.noise_std,
            "ap50": self.ap50,
            "ap70": self.ap70,
            "comm_bytes": self.comm_bytes,
            "seeds": list(self.seeds),
            "n_scenes": self.n_scenes,
        }


def _single_heads(bev: np.ndarray, params):
    return decode_batch(encode_batch(Tensor(bev), params), params)


def detect(mode: CollabMode, datas, params: NetworkParams, grid: GridConfig, seed: int, ego: int = 0):
    """Detections for ``ego`` in every scene plus the mean bytes per sender message."""
    poses = noisy_sender_poses(datas, mode.noise_std, seed) if mode.noise_std > 0 else None
    threshold, iou = _thresholds(params, grid)
    if mode.kind == "late":
        outs = [run_late_collab(d, params, ego, grid, None if poses is None else poses[b]) for b, d in enumerate(datas)]
        msgs = []
        for d in datas:
            for j in range(d.n_agents):
                if j != ego:
                    msgs.append(late_message_bytes(len(run_no_collab(d, j, params, grid).boxes)))
        dets = [(o.boxes, o.scores) for o in outs]
        return dets, int(round(np.mean(msgs))) if msgs else 0
    if mode.kind == "intermediate":
        fwd = forward_intermediate(datas, params, grid.resolution * 2, poses)
        rows = np.cumsum([0] + [d.n_agents for d in datas])[:-1] + ego
        cls_logits, reg = fwd.cls_logits.data[rows], fwd.reg.data[rows]
        comm = comm_volume(MESSAGE_FEATURE_DIMS, FLOAT_BYTES, mode.ratio_denominator, 1)
    else:
        if mode.kind == "none":
            bev = np.stack([d.bev[ego] for d in datas])
            comm = 0
        else:
            bev = np.stack([early_bev(d, ego, grid.resolution, None if poses is None else poses[b]) for b, d in enumerate(datas)])
            msgs = [early_message_bytes(d.points[j]) for d in datas for j in range(d.n_agents) if j != ego]
            comm = int(round(np.mean(msgs))) if msgs else 0
        cls_logits, reg = (t.data for t in _single_heads(bev, params))
    dets = []
    for k in range(len(datas)):
        out = heads_to_detections(Tensor(cls_logits[k]), Tensor(reg[k]), grid, threshold, iou)
        dets.append((out.boxes, out.scores))
    return dets, comm


def evaluate(mode: CollabMode, datas, params: NetworkParams, grid: GridConfig, seed: int, ego: int = 0):
    """``(ap50, ap70, comm_bytes)`` for one mode, model and seed."""
    if not datas:
        raise ContractError("evaluation needs at least one scene")
    dets, comm = detect(mode, datas, params, grid, seed, ego)
    gts = [d.labels[ego].boxes for d in datas]
    return compute_ap(dets, gts, 0.5), compute_ap(dets, gts, 0.7), comm


def run_benchmark(checkpoints: dict, modes, test_scenes, seeds, grid: GridConfig = GridConfig(), ego: int = 0):
    """Evaluate every mode for every seed.

    ``checkpoints[key][seed]`` holds parameters (or a path) for the model
    named by ``CollabMode.checkpoint_key``. Returns ``(reports, sweep_rows)``.
    """
    if not test_scenes:
        raise ContractError("benchmark needs at least one test scene")
    seeds = list(seeds)
    if not seeds:
        raise ContractError("benchmark needs at least one seed")
    reports, rows = [], []
    for mode in modes:
        key = mode.checkpoint_key
        if key not in checkpoints:
            raise ContractError(f"no checkpoint for mode {mode.label!r} (expected key {key!r})")
        per_seed = []
        for seed in seeds:
            if seed not in checkpoints[key]:
                raise ContractError(f"no checkpoint for mode {mode.label!r}, seed {seed}")
            params = checkpoints[key][seed]
            if not isinstance(params, NetworkParams):
                params = NetworkParams.load(params)
            ap50, ap70, comm = evaluate(mode, test_scenes, params, grid, seed, ego)
            per_seed.append((ap50, ap70, comm))
            rows.append({"mode": mode.label, "ratio_denominator": mode.ratio_denominator, "noise_std": mode.noise_std,
                         "seed": seed, "ap50": ap50, "ap70": ap70, "comm_bytes": comm})
        reports.append(EvalReport(
            mode,
            float(np.mean([p[0] for p in per_seed])),
            float(np.mean([p[1] for p in per_seed])),
            int(round(np.mean([p[2] for p in per_seed]))),
            tuple(seeds),
            len(test_scenes),
            tuple(per_seed),
        ))
    return reports, rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in SWEEP_FIELDS})
    return buf.getvalue()


def read_sweep_csv(text: str) -> list:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        out.append({
            "mode": r["mode"], "ratio_denominator": int(r["ratio_denominator"]), "noise_std": float(r["noise_std"]),
            "seed": int(r["seed"]), "ap50": float(r["ap50"]), "ap70": float(r["ap70"]), "comm_bytes": int(r["comm_bytes"]),
        })
    return out


# -- weight heatmaps ---------------------------------------------------------------------------
def weight_maps(data, params: NetworkParams, grid: GridConfig = GridConfig()) -> dict:
    """``{(ego, sender): [H, W]}`` fusion weights for one scene."""
    fwd = forward_intermediate([data], params, grid.resolution * 2)
    w = fwd.weights.data[..., 0]
    lay = fwd.layout
    return {(int(i), int(j)): w[p] for p, (i, j) in enumerate(zip(lay.ego, lay.sender))}


def is_finite_report(report: EvalReport) -> bool:
    return math.isfinite(report.ap50) and math.isfinite(report.ap70)
