"""Synthetic multi-agent worlds: generation, ray-cast sensing, BEV grids, labels.

A scene is a square world of axis-aligned rectangular objects observed by
2-5 agents. Each agent casts evenly spaced rays; a ray reports only the
first object boundary it meets, so nearer objects hide farther ones. Hits
are sampled at fixed beam heights below the object's height, which fills
the height bands of the bird's-eye-view grid.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, GenerationError
from .geometry import SE2, box_corners, rebox, transform_box
from .tensor import Tensor


@dataclass(frozen=True)
class SceneConfig:
    extent: float = 64.0
    agent_count: tuple = (2, 5)
    agent_radius: float = 6.0
    agent_min_separation: float = 2.0
    object_count: tuple = (14, 20)
    object_region: float = 10.0
    object_width: tuple = (1.6, 2.2)
    object_length: tuple = (3.6, 5.0)
    object_height: tuple = (0.8, 2.0)
    object_gap: float = 0.3
    agent_clearance: float = 1.0
    yaw_range: float = math.pi
    rotate_scene: bool = False
    max_attempts: int = 50000

    def validate(self):
        if self.extent <= 0:
            raise ContractError("extent must be positive")
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise ContractError(f"object count range {self.object_count} is empty")
        lo, hi = self.agent_count
        if not 2 <= lo <= hi <= 5:
            raise ContractError(f"agent count range {self.agent_count} must lie within [2, 5]")


@dataclass(frozen=True)
class SensorConfig:
    n_rays: int = 360
    max_range: float = 28.0
    beam_heights: tuple = (0.25, 0.75, 1.25, 1.75)


@dataclass(frozen=True)
class GridConfig:
    size: int = 32
    resolution: float = 0.5
    channels: int = 4
    z_min: float = 0.0
    band_height: float = 0.5

    @property
    def half_extent(self) -> float:
        return self.size * self.resolution / 2.0

    def voxel_centers(self) -> tuple:
        """Ego-frame (x, y) of every voxel centre, each of shape (size, size)."""
        coords = (np.arange(self.size) + 0.5) * self.resolution - self.half_extent
        return np.meshgrid(coords, coords, indexing="xy")


@dataclass(frozen=True)
class Scene:
    """Objects are rows ``(cx, cy, width_x, length_y, height)`` in world metres."""

    id: int
    extent: float
    objects: np.ndarray
    agents: tuple
    seed: int

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def boxes(self) -> np.ndarray:
        """World-frame ``(x1, y1, x2, y2)`` of every object."""
        o = self.objects
        return np.stack(
            [o[:, 0] - o[:, 2] / 2, o[:, 1] - o[:, 3] / 2, o[:, 0] + o[:, 2] / 2, o[:, 1] + o[:, 3] / 2], axis=1
        ) if len(o) else np.zeros((0, 4))

    def translated(self, dx: float, dy: float) -> "Scene":
        objs = self.objects.copy()
        objs[:, 0] += dx
        objs[:, 1] += dy
        agents = tuple(SE2(a.x + dx, a.y + dy, a.yaw) for a in self.agents)
        return Scene(self.id, self.extent, objs, agents, self.seed)

    def to_dict(self) -> dict:
        return {
            "format": "collabmi.scene/1",
            "id": int(self.id),
            "seed": int(self.seed),
            "extent": float(self.extent),
            "agents": [list(a.as_tuple()) for a in self.agents],
            "objects": [[float(v) for v in row] for row in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        if d.get("format") != "collabmi.scene/1":
            raise ContractError(f"unsupported scene format {d.get('format')!r}")
        objs = np.array(d["objects"], dtype=np.float64).reshape(-1, 5)
        return cls(int(d["id"]), float(d["extent"]), objs, tuple(SE2(*a) for a in d["agents"]), int(d["seed"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(scene.dumps())


def load_scene(path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))


def _overlap(a, b, gap=0.0) -> bool:
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def generate_scene(seed: int, config: SceneConfig = SceneConfig(), scene_id: int | None = None) -> Scene:
    """Rejection-sample agents and non-overlapping objects; pure in ``(seed, config)``."""
    config.validate()
    rng = np.random.default_rng(seed)
    half = config.extent / 2.0
    n_agents = int(rng.integers(config.agent_count[0], config.agent_count[1] + 1))
    n_objects = int(rng.integers(config.object_count[0], config.object_count[1] + 1))
    rotation = float(rng.uniform(-math.pi, math.pi)) if config.rotate_scene else 0.0
    spin = SE2(0.0, 0.0, rotation)

    agents = []
    attempts = 0
    while len(agents) < n_agents:
        attempts += 1
        if attempts > config.max_attempts:
            raise GenerationError(f"agent separation {config.agent_min_separation} m not satisfiable")
        r = config.agent_radius * math.sqrt(rng.uniform())
        phi = rng.uniform(-math.pi, math.pi)
        x, y = r * math.cos(phi), r * math.sin(phi)
        if any(math.hypot(x - a.x, y - a.y) < config.agent_min_separation for a in agents):
            continue
        agents.append(SE2(x, y, rng.uniform(-config.yaw_range, config.yaw_range)))

    boxes, heights = [], []
    attempts = 0
    while len(boxes) < n_objects:
        attempts += 1
        if attempts > config.max_attempts:
            raise GenerationError(
                f"could not place {n_objects} non-overlapping objects (gap {config.object_gap} m) "
                f"within {config.max_attempts} attempts"
            )
        w = rng.uniform(*config.object_width)
        length = rng.uniform(*config.object_length)
        if rng.uniform() < 0.5:
            w, length = length, w
        cx, cy = rng.uniform(-config.object_region, config.object_region, size=2)
        height = rng.uniform(*config.object_height)
        local = np.array([cx - w / 2, cy - length / 2, cx + w / 2, cy + length / 2])
        box = rebox(spin.apply(box_corners(local)))
        if box[0] < -half or box[1] < -half or box[2] > half or box[3] > half:
            continue
        if any(_overlap(box, b, config.object_gap) for b in boxes):
            continue
        near = [
            a for a in agents
            if box[0] - config.agent_clearance < a.x < box[2] + config.agent_clearance
            and box[1] - config.agent_clearance < a.y < box[3] + config.agent_clearance
        ]
        if near:
            continue
        boxes.append(box)
        heights.append(height)

    objects = np.array(
        [[(b[0] + b[2]) / 2, (b[1] + b[3]) / 2, b[2] - b[0], b[3] - b[1], h] for b, h in zip(boxes, heights)],
        dtype=np.float64,
    ).reshape(-1, 5)
    return Scene(seed if scene_id is None else scene_id, config.extent, objects, tuple(agents), seed)


# -- sensing ------------------------------------------------------------------
def cast_rays(scene: Scene, origin: SE2, sensor: SensorConfig = SensorConfig()):
    """Per-ray distance to the first object hit (inf if none) and that object's index (-1)."""
    angles = origin.yaw + 2.0 * math.pi * np.arange(sensor.n_rays) / sensor.n_rays
    dx, dy = np.cos(angles)[:, None], np.sin(angles)[:, None]
    boxes = scene.boxes()
    if len(boxes) == 0:
        return np.full(sensor.n_rays, np.inf), np.full(sensor.n_rays, -1)
    ox, oy = origin.x, origin.y
    tx_min, tx_max = _slab(boxes[:, 0], boxes[:, 2], ox, dx)
    ty_min, ty_max = _slab(boxes[:, 1], boxes[:, 3], oy, dy)
    t_near = np.maximum(tx_min, ty_min)
    t_far = np.minimum(tx_max, ty_max)
    hit = (t_near <= t_far) & (t_near >= 0)
    t = np.where(hit, t_near, np.inf)
    idx = np.argmin(t, axis=1)
    best = t[np.arange(sensor.n_rays), idx]
    in_range = best <= sensor.max_range
    return np.where(in_range, best, np.inf), np.where(in_range, idx, -1)


def _slab(lo, hi, o, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None, :] - o) / d
        t2 = (hi[None, :] - o) / d
    parallel = d == 0
    inside = (lo <= o) & (o <= hi)
    t_min = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_max = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    return t_min, t_max


def raycast_observe(scene: Scene, agent_index: int, sensor: SensorConfig = SensorConfig()) -> np.ndarray:
    """World-frame hit points ``(x, y, z)`` seen by one agent, ordered by ray then beam."""
    if not 0 <= agent_index < scene.n_agents:
        raise ContractError(f"agent index {agent_index} out of range for {scene.n_agents} agents")
    origin = scene.agents[agent_index]
    t, idx = cast_rays(scene, origin, sensor)
    rays = np.flatnonzero(idx >= 0)
    if rays.size == 0:
        return np.zeros((0, 3))
    angles = origin.yaw + 2.0 * math.pi * rays / sensor.n_rays
    hx = origin.x + t[rays] * np.cos(angles)
    hy = origin.y + t[rays] * np.sin(angles)
    heights = scene.objects[idx[rays], 4]
    beams = np.asarray(sensor.beam_heights, dtype=np.float64)
    mask = beams[None, :] < heights[:, None]
    ray_i, beam_i = np.nonzero(mask)
    return np.stack([hx[ray_i], hy[ray_i], beams[beam_i]], axis=1)


def visible_objects(scene: Scene, agent_index: int, sensor: SensorConfig = SensorConfig()) -> frozenset:
    _, idx = cast_rays(scene, scene.agents[agent_index], sensor)
    return frozenset(int(i) for i in idx[idx >= 0])


# -- bird's-eye view ---------------------------------------------------------------
_BEV_MAGIC = b"BEV1"
_DTYPE_CODES = {np.dtype(np.float64): 1, np.dtype(np.float32): 2, np.dtype(np.uint8): 3}


@dataclass(frozen=True)
class BevGrid:
    occupancy: np.ndarray
    resolution: float

    @property
    def shape(self) -> tuple:
        return self.occupancy.shape

    def tensor(self) -> Tensor:
        return Tensor(self.occupancy)

    def to_bytes(self, dtype=np.uint8) -> bytes:
        arr = np.ascontiguousarray(self.occupancy, dtype=dtype)
        h, w, c = arr.shape
        header = _BEV_MAGIC + struct.pack("<IIHH", h, w, c, _DTYPE_CODES[arr.dtype])
        return header + arr.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, resolution: float) -> "BevGrid":
        if blob[:4] != _BEV_MAGIC:
            raise ContractError("not a BEV grid file")
        h, w, c, code = struct.unpack("<IIHH", blob[4:16])
        dtype = {v: k for k, v in _DTYPE_CODES.items()}[code]
        arr = np.frombuffer(blob[16:], dtype=dtype).reshape(h, w, c).astype(np.float64)
        return cls(arr, resolution)


def voxelize(points, ego: SE2, grid: GridConfig = GridConfig()) -> BevGrid:
    """Bin world-frame points into the ego-centred occupancy grid (1 where any point lands)."""
    occ = np.zeros((grid.size, grid.size, grid.channels))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts):
        local = ego.inverse().apply(pts)
        col = np.floor(local[:, 0] / grid.resolution + grid.size / 2).astype(np.intp)
        row = np.floor(local[:, 1] / grid.resolution + grid.size / 2).astype(np.intp)
        band = np.floor((local[:, 2] - grid.z_min) / grid.band_height).astype(np.intp)
        keep = (col >= 0) & (col < grid.size) & (row >= 0) & (row < grid.size) & (band >= 0) & (band < grid.channels)
        occ[row[keep], col[keep], band[keep]] = 1.0
    return BevGrid(occ, grid.resolution)


@dataclass(frozen=True)
class LabelGrid:
    """Per-voxel targets in the ego frame plus the ground-truth boxes they came from.

    ``regression`` channels are ``(dx, dy, log w, log l)``: metres from the voxel
    centre to the box centre and the log of the ego-frame box size.
    """

    foreground: np.ndarray
    regression: np.ndarray
    boxes: np.ndarray
    object_ids: tuple = field(default=())


def make_labels(scene: Scene, ego: SE2, grid: GridConfig = GridConfig(), include=None) -> LabelGrid:
    """Foreground where a voxel centre lies inside an object footprint.

    ``include`` restricts labelling to a subset of object indices.
    """
    fg = np.zeros((grid.size, grid.size))
    reg = np.zeros((grid.size, grid.size, 4))
    vx, vy = grid.voxel_centers()
    world = ego.apply(np.stack([vx.ravel(), vy.ravel()], axis=1))
    wx, wy = world[:, 0].reshape(vx.shape), world[:, 1].reshape(vx.shape)
    boxes, ids = [], []
    to_ego = ego.inverse()
    world_boxes = scene.boxes()
    for i in range(len(world_boxes)) if include is None else sorted(include):
        x1, y1, x2, y2 = world_boxes[i]
        inside = (wx >= x1) & (wx <= x2) & (wy >= y1) & (wy <= y2)
        if not inside.any():
            continue
        ego_box = transform_box(world_boxes[i], to_ego)
        cx, cy = (ego_box[0] + ego_box[2]) / 2, (ego_box[1] + ego_box[3]) / 2
        fg[inside] = 1.0
        reg[inside, 0] = cx - vx[inside]
        reg[inside, 1] = cy - vy[inside]
        reg[inside, 2] = math.log(ego_box[2] - ego_box[0])
        reg[inside, 3] = math.log(ego_box[3] - ego_box[1])
        boxes.append(ego_box)
        ids.append(int(i))
    return LabelGrid(fg, reg, np.array(boxes).reshape(-1, 4), tuple(ids))


# -- whole-scene observation ------------------------------------------------------------
@dataclass(frozen=True)
class SceneData:
    """A scene with every agent's observation and labels, ready for the network."""

    scene: Scene
    bev: np.ndarray
    labels: tuple
    visible: tuple
    points: tuple

    @property
    def id(self) -> int:
        return self.scene.id

    @property
    def n_agents(self) -> int:
        return self.scene.n_agents


def observe_scene(
    scene: Scene,
    sensor: SensorConfig = SensorConfig(),
    grid: GridConfig = GridConfig(),
    label_visible_only: bool = True,
) -> SceneData:
    points = tuple(raycast_observe(scene, i, sensor) for i in range(scene.n_agents))
    visible = tuple(visible_objects(scene, i, sensor) for i in range(scene.n_agents))
    seen = frozenset().union(*visible) if label_visible_only else None
    bev = np.stack([voxelize(points[i], scene.agents[i], grid).occupancy for i in range(scene.n_agents)])
    labels = tuple(make_labels(scene, a, grid, include=seen) for a in scene.agents)
    return SceneData(scene, bev, labels, visible, points)


def has_hidden_object(data: SceneData, ego: int = 0) -> bool:
    """Some labelled object in ego's crop is invisible to ego but seen by another agent."""
    others = frozenset().union(*(v for i, v in enumerate(data.visible) if i != ego))
    return any(o not in data.visible[ego] and o in others for o in data.labels[ego].object_ids)


def build_dataset(
    n_scenes: int,
    first_seed: int,
    scene_config: SceneConfig = SceneConfig(),
    sensor: SensorConfig = SensorConfig(),
    grid: GridConfig = GridConfig(),
    occlusion_only: bool = False,
    label_visible_only: bool = True,
) -> list:
    """Scenes from consecutive seeds; with ``occlusion_only`` keep those where agent 0 misses something."""
    out, seed = [], first_seed
    while len(out) < n_scenes:
        data = observe_scene(generate_scene(seed, scene_config), sensor, grid, label_visible_only)
        seed += 1
        if occlusion_only and not has_hidden_object(data, 0):
            continue
        out.append(data)
    return out


def check_bev(bev: np.ndarray, grid: GridConfig):
    if bev.shape[-3:] != (grid.size, grid.size, grid.channels):
        raise DimensionError(f"BEV shape {bev.shape} does not match grid {(grid.size, grid.size, grid.channels)}")
