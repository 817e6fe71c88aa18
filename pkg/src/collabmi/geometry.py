"""Planar rigid motions (poses) and axis-aligned box helpers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


@dataclass(frozen=True)
class SE2:
    """Rigid 2D motion: rotate by ``yaw`` then translate by ``(x, y)``."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def identity(cls) -> "SE2":
        return cls(0.0, 0.0, 0.0)

    def compose(self, other: "SE2") -> "SE2":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return SE2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    __matmul__ = compose

    def inverse(self) -> "SE2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return SE2(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.yaw)

    def apply(self, points) -> np.ndarray:
        """Transform an ``(n, 2)`` array of points (extra columns pass through)."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            return pts.reshape(0, pts.shape[-1] if pts.ndim == 2 else 2).copy()
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = pts.copy()
        out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + self.x
        out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + self.y
        return out

    def scaled(self, factor: float) -> "SE2":
        """Same rotation, translation multiplied by ``factor`` (unit change)."""
        return SE2(self.x * factor, self.y * factor, self.yaw)

    def as_tuple(self) -> tuple:
        return (self.x, self.y, self.yaw)


def relative_pose(ego: SE2, other: SE2) -> SE2:
    """Transform taking coordinates in ``other``'s frame to ``ego``'s frame."""
    return ego.inverse().compose(other)


def box_corners(box) -> np.ndarray:
    """Corners of an axis-aligned ``(x1, y1, x2, y2)`` box, shape (4, 2)."""
    x1, y1, x2, y2 = box[:4]
    return np.array([[x1, y1], [x2, y1], [x2, y2], [x1, y2]], dtype=np.float64)


def rebox(corners) -> np.ndarray:
    """Axis-aligned bounding box ``(x1, y1, x2, y2)`` of a point set."""
    c = np.asarray(corners, dtype=np.float64)
    return np.array([c[:, 0].min(), c[:, 1].min(), c[:, 0].max(), c[:, 1].max()])


def transform_box(box, pose: SE2) -> np.ndarray:
    return rebox(pose.apply(box_corners(box)))


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU of axis-aligned boxes ``a[n, 4]`` and ``b[m, 4]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)
