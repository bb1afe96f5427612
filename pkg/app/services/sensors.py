from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Final, Optional, Sequence

import numpy as np
from shapely.geometry import Point, Polygon

from app.core.geometry import Pose, wrap_angle
from app.services.sim_engine import EGO_ID, SimState, VehicleState, WeatherState
from app.services.world_model import TARGET_NONE, Footprint, StaticWorld, raycast_many


logger = logging.getLogger(__name__)


NOISE_CLIP_SIGMAS: Final[float] = 3.0


@dataclass(frozen=True, slots=True)
class LidarConfig:
    beam_count: int = 360
    fov: float = 2.0 * math.pi
    max_range: float = 50.0
    range_noise_sigma: float = 0.02
    mount_pose: Pose = field(default_factory=Pose.identity)  # sensor in ego frame

    def __post_init__(self) -> None:
        if self.beam_count < 1:
            raise ValueError("beam_count must be >= 1")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if not 0 < self.fov <= 2.0 * math.pi:
            raise ValueError("fov must be in (0, 2*pi]")
        if self.range_noise_sigma < 0:
            raise ValueError("range_noise_sigma must be >= 0")


@dataclass(frozen=True, slots=True)
class PointCloud:
    """
    Planar returns in the sensor frame.

    `ranges` is per beam when the cloud comes from a scan: finite for a return,
    +inf for a miss, NaN for a dropped return.
    """

    points: np.ndarray
    stamp: float = 0.0
    beam_angles: Optional[np.ndarray] = None
    ranges: Optional[np.ndarray] = None
    max_range: float = math.inf

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float).reshape(-1, 2))

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, stamp: float = 0.0) -> PointCloud:
        return cls(np.zeros((0, 2)), stamp)


@dataclass(frozen=True, slots=True)
class GpsFix:
    position: Optional[tuple[float, float]]
    valid: bool
    noise_sigma: float


@dataclass(frozen=True, slots=True)
class OdometryNoise:
    translation_frac: float = 0.0  # multiplicative sigma on distance
    yaw_sigma: float = 0.0


@dataclass(frozen=True, slots=True)
class OdometryDelta:
    d_translation: float
    d_yaw: float
    interval: float

    def __post_init__(self) -> None:
        if self.interval <= 0:
            raise ValueError("odometry interval must be positive")


def lidar_beam_angles(cfg: LidarConfig) -> list[float]:
    """Beam angles in the sensor frame, evenly spaced over the fov."""
    step = cfg.fov / cfg.beam_count
    return [-cfg.fov / 2.0 + i * step for i in range(cfg.beam_count)]


def scan_lidar(
    world: StaticWorld,
    agents: Sequence[tuple[int, Footprint]],
    ego_pose: Pose,
    cfg: LidarConfig,
    weather: WeatherState,
    rng: np.random.Generator,
    *,
    stamp: float = 0.0,
) -> PointCloud:
    sensor = ego_pose.compose(cfg.mount_pose)
    local = lidar_beam_angles(cfg)
    targets = [(i, fp) for i, fp in agents if i != EGO_ID]
    fan = raycast_many(world, targets, (sensor.x, sensor.y), [sensor.yaw + a for a in local], cfg.max_range)

    n = cfg.beam_count
    sigma = cfg.range_noise_sigma * weather.sensor_noise_scale
    # Draw for every beam regardless of outcome so the stream position only depends on beam_count.
    noise = np.clip(rng.standard_normal(n) * sigma, -NOISE_CLIP_SIGMAS * sigma, NOISE_CLIP_SIGMAS * sigma)
    dropped = rng.random(n) < weather.sensor_dropout_prob

    hit = fan.targets != TARGET_NONE
    ranges = np.full(n, np.inf)
    ranges[hit] = np.maximum(fan.distances[hit] + noise[hit], 0.0)
    ranges[hit & dropped] = np.nan

    keep = hit & ~dropped
    angles = np.array(local)
    pts = np.column_stack([ranges[keep] * np.array([math.cos(a) for a in angles[keep]]),
                           ranges[keep] * np.array([math.sin(a) for a in angles[keep]])]) if keep.any() else np.zeros((0, 2))
    return PointCloud(points=pts, stamp=stamp, beam_angles=angles, ranges=ranges, max_range=cfg.max_range)


def scan_state(
    world: StaticWorld, state: SimState, cfg: LidarConfig, rng: np.random.Generator
) -> PointCloud:
    return scan_lidar(
        world, state.footprints(include_ego=False), state.ego.pose, cfg, state.weather, rng, stamp=state.time
    )


def read_gps(
    true_position: tuple[float, float],
    denial_zones: Sequence[Polygon],
    noise_sigma: float,
    rng: np.random.Generator,
) -> GpsFix:
    noise = rng.standard_normal(2) * noise_sigma
    x, y = true_position
    pt = Point(x, y)
    if any(zone.covers(pt) for zone in denial_zones):
        return GpsFix(position=None, valid=False, noise_sigma=noise_sigma)
    return GpsFix(position=(x + float(noise[0]), y + float(noise[1])), valid=True, noise_sigma=noise_sigma)


def read_odometry(
    prev: VehicleState,
    curr: VehicleState,
    dt: float,
    noise: OdometryNoise,
    rng: np.random.Generator,
) -> OdometryDelta:
    n = rng.standard_normal(2)
    d_translation = prev.speed * dt
    if noise.translation_frac:
        d_translation *= 1.0 + noise.translation_frac * float(n[0])
    d_yaw = wrap_angle(curr.yaw - prev.yaw)
    if noise.yaw_sigma:
        d_yaw += noise.yaw_sigma * float(n[1])
    return OdometryDelta(d_translation=d_translation, d_yaw=d_yaw, interval=dt)


@dataclass(slots=True)
class SensorStreams:
    """Independent generators per sensor, split off the scenario seed."""

    lidar: np.random.Generator
    gps: np.random.Generator
    odometry: np.random.Generator

    @classmethod
    def from_seed_sequence(cls, seq: np.random.SeedSequence) -> SensorStreams:
        lidar, gps, odo = seq.spawn(3)
        return cls(
            lidar=np.random.Generator(np.random.PCG64(lidar)),
            gps=np.random.Generator(np.random.PCG64(gps)),
            odometry=np.random.Generator(np.random.PCG64(odo)),
        )
