from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np


TWO_PI = 2.0 * math.pi


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.remainder(angle, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


def rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True, slots=True)
class Pose:
    x: float
    y: float
    yaw: float

    @classmethod
    def identity(cls) -> Pose:
        return cls(0.0, 0.0, 0.0)

    def compose(self, other: Pose) -> Pose:
        """self ∘ other: `other` expressed in self's frame, lifted to the parent frame."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            wrap_angle(self.yaw + other.yaw),
        )

    def inverse(self) -> Pose:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose(-(c * self.x + s * self.y), s * self.x - c * self.y, wrap_angle(-self.yaw))

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return pts @ rotation(self.yaw).T + np.array([self.x, self.y])

    def inverse_transform_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return (pts - np.array([self.x, self.y])) @ rotation(self.yaw)

    def to_local(self, x: float, y: float) -> tuple[float, float]:
        dx, dy = x - self.x, y - self.y
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return c * dx + s * dy, -s * dx + c * dy

    def to_global(self, x: float, y: float) -> tuple[float, float]:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return self.x + c * x - s * y, self.y + s * x + c * y

    def distance_to(self, other: Pose) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.yaw)


@dataclass(frozen=True, slots=True)
class Projection2D:
    """Closest point on a polyline."""

    s: float
    distance: float
    lateral: float  # signed, positive to the left of travel
    segment: int
    point: tuple[float, float]


class Polyline:
    """Piecewise-linear curve parameterised by arclength."""

    __slots__ = ("points", "cumulative", "_seg_vec", "_seg_len")

    def __init__(self, points: Iterable[Sequence[float]] | np.ndarray) -> None:
        pts = np.asarray(list(points) if not isinstance(points, np.ndarray) else points, dtype=float)
        pts = pts.reshape(-1, 2)
        if len(pts) > 1:
            keep = np.ones(len(pts), dtype=bool)
            keep[1:] = np.any(np.diff(pts, axis=0) != 0.0, axis=1)
            pts = pts[keep]
        if len(pts) < 2:
            raise ValueError("Polyline needs at least two distinct points")
        self.points = pts
        self._seg_vec = np.diff(pts, axis=0)
        self._seg_len = np.hypot(self._seg_vec[:, 0], self._seg_vec[:, 1])
        self.cumulative = np.concatenate(([0.0], np.cumsum(self._seg_len)))

    @property
    def length(self) -> float:
        return float(self.cumulative[-1])

    def __len__(self) -> int:
        return len(self.points)

    def _segment_at(self, s: float) -> int:
        idx = int(np.searchsorted(self.cumulative, s, side="right")) - 1
        return min(max(idx, 0), len(self._seg_len) - 1)

    def point_at(self, s: float) -> tuple[float, float]:
        s = min(max(s, 0.0), self.length)
        i = self._segment_at(s)
        t = (s - self.cumulative[i]) / self._seg_len[i]
        p = self.points[i] + t * self._seg_vec[i]
        return float(p[0]), float(p[1])

    def heading_at(self, s: float) -> float:
        s = min(max(s, 0.0), self.length)
        i = self._segment_at(s)
        v = self._seg_vec[i]
        return math.atan2(v[1], v[0])

    def segment_headings(self) -> np.ndarray:
        return np.arctan2(self._seg_vec[:, 1], self._seg_vec[:, 0])

    def project(
        self,
        x: float,
        y: float,
        s_min: Optional[float] = None,
        s_max: Optional[float] = None,
    ) -> Projection2D:
        lo, hi = 0, len(self._seg_len)
        if s_min is not None:
            lo = self._segment_at(max(s_min, 0.0))
        if s_max is not None:
            hi = self._segment_at(min(s_max, self.length)) + 1
        if hi <= lo:
            hi = lo + 1
        a = self.points[lo:hi]
        d = self._seg_vec[lo:hi]
        seg_len_sq = self._seg_len[lo:hi] ** 2
        rel = np.array([x, y]) - a
        t = np.clip((rel[:, 0] * d[:, 0] + rel[:, 1] * d[:, 1]) / seg_len_sq, 0.0, 1.0)
        q = a + t[:, None] * d
        dist = np.hypot(x - q[:, 0], y - q[:, 1])
        k = int(np.argmin(dist))
        i = lo + k
        qx, qy = float(q[k, 0]), float(q[k, 1])
        cross = d[k, 0] * (y - qy) - d[k, 1] * (x - qx)
        lateral = float(dist[k]) if cross >= 0 else -float(dist[k])
        s = float(self.cumulative[i] + t[k] * self._seg_len[i])
        return Projection2D(s=s, distance=float(dist[k]), lateral=lateral, segment=i, point=(qx, qy))

    def slice(self, s0: float, s1: float) -> Polyline:
        s0 = min(max(s0, 0.0), self.length)
        s1 = min(max(s1, 0.0), self.length)
        if s1 <= s0:
            raise ValueError("Empty polyline slice")
        inner = self.points[(self.cumulative > s0) & (self.cumulative < s1)]
        return Polyline(np.vstack([self.point_at(s0), inner, self.point_at(s1)]))


def segment_intersects_segment(
    p1: tuple[float, float], p2: tuple[float, float], q1: tuple[float, float], q2: tuple[float, float]
) -> bool:
    def orient(a, b, c) -> float:
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def point_segment_distance(px: float, py: float, ax: float, ay: float, bx: float, by: float) -> float:
    dx, dy = bx - ax, by - ay
    den = dx * dx + dy * dy
    if den == 0.0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / den
    t = min(max(t, 0.0), 1.0)
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))
