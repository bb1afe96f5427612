from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Final, Iterable, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial import cKDTree

from app.core.errors import EmptyMapError, NoOverlapError
from app.core.geometry import Pose, rotation, wrap_angle
from app.services.sensors import OdometryDelta, PointCloud


logger = logging.getLogger(__name__)


MIN_POINTS_PER_CELL: Final[int] = 3
EIGEN_FLOOR_FRACTION: Final[float] = 0.01
MAX_ITERATIONS: Final[int] = 30
TRANSLATION_TOL: Final[float] = 1e-4
YAW_TOL: Final[float] = 1e-5
MAX_TRANSLATION_STEP: Final[float] = 1.0
MAX_YAW_STEP: Final[float] = 0.2
FIT_MAHALANOBIS_SQ: Final[float] = 9.0  # 3 sigma
COARSE_FIT_RATIO: Final[float] = 0.5
COARSE_FACTORS: Final[tuple[int, ...]] = (4, 2)

_KEY_OFFSET: Final[int] = 1 << 20
_KEY_STRIDE: Final[int] = 1 << 21


def _encode(i: np.ndarray, j: np.ndarray) -> np.ndarray:
    return (i.astype(np.int64) + _KEY_OFFSET) * _KEY_STRIDE + (j.astype(np.int64) + _KEY_OFFSET)


@dataclass(frozen=True, slots=True)
class NdtCell:
    count: int
    mean: np.ndarray
    raw_covariance: np.ndarray  # sample covariance (n - 1), before regularisation
    covariance: np.ndarray
    inv_covariance: np.ndarray


def regularize(raw: np.ndarray, floor: float) -> tuple[np.ndarray, np.ndarray]:
    """Clamp eigenvalues to `floor`; returns (covariance, inverse)."""
    sym = 0.5 * (raw + raw.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.maximum(vals, floor)
    cov = (vecs * vals) @ vecs.T
    inv = (vecs / vals) @ vecs.T
    return cov, inv


def make_cell(count: int, mean: np.ndarray, raw_cov: np.ndarray, cell_size: float) -> NdtCell:
    cov, inv = regularize(raw_cov, EIGEN_FLOOR_FRACTION * cell_size * cell_size)
    return NdtCell(count=count, mean=np.asarray(mean, dtype=float), raw_covariance=np.asarray(raw_cov, dtype=float),
                   covariance=cov, inv_covariance=inv)


class NdtMap:
    """Sparse grid of per-cell Gaussians."""

    __slots__ = ("cell_size", "origin", "cells", "min_points", "_codes", "_means", "_inv", "_pyramid")

    def __init__(
        self,
        cell_size: float,
        cells: dict[tuple[int, int], NdtCell],
        *,
        origin: tuple[float, float] = (0.0, 0.0),
        min_points: int = MIN_POINTS_PER_CELL,
    ) -> None:
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.cell_size = float(cell_size)
        self.origin = (float(origin[0]), float(origin[1]))
        self.min_points = min_points
        self.cells = dict(sorted(cells.items()))
        keys = list(self.cells.keys())
        ii = np.array([k[0] for k in keys], dtype=np.int64)
        jj = np.array([k[1] for k in keys], dtype=np.int64)
        codes = _encode(ii, jj)
        order = np.argsort(codes, kind="stable")
        self._codes = codes[order]
        cell_list = [self.cells[keys[k]] for k in order]
        self._means = np.array([c.mean for c in cell_list], dtype=float).reshape(-1, 2)
        self._inv = np.array([c.inv_covariance for c in cell_list], dtype=float).reshape(-1, 2, 2)
        self._pyramid: dict[int, NdtMap] = {}

    def __len__(self) -> int:
        return len(self.cells)

    def cell_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        i = np.floor((pts[:, 0] - self.origin[0]) / self.cell_size).astype(np.int64)
        j = np.floor((pts[:, 1] - self.origin[1]) / self.cell_size).astype(np.int64)
        return i, j

    def associate(self, points: np.ndarray) -> np.ndarray:
        """Row index of the populated cell containing each point, -1 if none."""
        if len(self._codes) == 0 or len(points) == 0:
            return np.full(len(points), -1, dtype=np.int64)
        codes = _encode(*self.cell_index(points))
        pos = np.searchsorted(self._codes, codes)
        pos_c = np.minimum(pos, len(self._codes) - 1)
        found = self._codes[pos_c] == codes
        return np.where(found, pos_c, -1)

    def coarsen(self, factor: int) -> NdtMap:
        """Pool cell moments into cells `factor` times larger."""
        if factor == 1:
            return self
        cached = self._pyramid.get(factor)
        if cached is not None:
            return cached
        groups: dict[tuple[int, int], list[NdtCell]] = {}
        for (i, j), cell in self.cells.items():
            groups.setdefault((i // factor, j // factor), []).append(cell)
        size = self.cell_size * factor
        cells: dict[tuple[int, int], NdtCell] = {}
        for key, members in groups.items():
            n = sum(c.count for c in members)
            if n < self.min_points:
                continue
            mean = sum(c.count * c.mean for c in members) / n
            scatter = sum((c.count - 1) * c.raw_covariance + c.count * np.outer(c.mean, c.mean) for c in members)
            raw = (scatter - n * np.outer(mean, mean)) / (n - 1)
            cells[key] = make_cell(n, mean, raw, size)
        coarse = NdtMap(size, cells, origin=self.origin, min_points=self.min_points)
        self._pyramid[factor] = coarse
        return coarse


@dataclass(frozen=True, slots=True)
class PoseEstimate:
    pose: Pose
    score: float = 0.0
    iterations: int = 0
    converged: bool = False
    fit_ratio: float = 1.0


@dataclass(frozen=True, slots=True)
class Extrinsic:
    T_lidar: Pose = field(default_factory=Pose.identity)  # sensor in ego frame

    def __post_init__(self) -> None:
        if not -math.pi < self.T_lidar.yaw <= math.pi:
            raise ValueError("extrinsic rotation must be in (-pi, pi]")


def _points(cloud: PointCloud | np.ndarray) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return np.asarray(pts, dtype=float).reshape(-1, 2)


def downsample(cloud: PointCloud, radius: float) -> PointCloud:
    """Greedy Poisson-disk thinning in input order."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = _points(cloud)
    if len(pts) == 0:
        return PointCloud(pts, cloud.stamp)
    tree = cKDTree(pts)
    suppressed = np.zeros(len(pts), dtype=bool)
    keep: list[int] = []
    r2 = radius * radius
    for i in range(len(pts)):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in tree.query_ball_point(pts[i], radius):
            if j > i and not suppressed[j]:
                dx, dy = pts[j, 0] - pts[i, 0], pts[j, 1] - pts[i, 1]
                if dx * dx + dy * dy < r2:
                    suppressed[j] = True
    return PointCloud(pts[keep], cloud.stamp)


def build_ndt_map(
    scans: Sequence[tuple[PointCloud, Pose]],
    cell_size: float,
    *,
    origin: tuple[float, float] = (0.0, 0.0),
    min_points: int = MIN_POINTS_PER_CELL,
) -> NdtMap:
    """Each scan is paired with the sensor pose in the map frame."""
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    if not scans:
        raise EmptyMapError("No scans supplied")
    clouds = [pose.transform_points(_points(cloud)) for cloud, pose in scans]
    pts = np.vstack(clouds) if clouds else np.zeros((0, 2))
    if len(pts) == 0:
        raise EmptyMapError("Scans contain no points")
    return ndt_map_from_points(pts, cell_size, origin=origin, min_points=min_points)


def ndt_map_from_points(
    pts: np.ndarray,
    cell_size: float,
    *,
    origin: tuple[float, float] = (0.0, 0.0),
    min_points: int = MIN_POINTS_PER_CELL,
) -> NdtMap:
    index_map = NdtMap(cell_size, {}, origin=origin, min_points=min_points)
    i, j = index_map.cell_index(pts)
    codes = _encode(i, j)
    uniq, inverse, counts = np.unique(codes, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), 2))
    np.add.at(sums, inverse, pts)
    means = sums / counts[:, None]
    centered = pts - means[inverse]
    scatter = np.zeros((len(uniq), 2, 2))
    np.add.at(scatter, inverse, centered[:, :, None] * centered[:, None, :])

    cells: dict[tuple[int, int], NdtCell] = {}
    for k in range(len(uniq)):
        n = int(counts[k])
        if n < min_points:
            continue
        code = int(uniq[k])
        key = (code // _KEY_STRIDE - _KEY_OFFSET, code % _KEY_STRIDE - _KEY_OFFSET)
        cells[key] = make_cell(n, means[k], scatter[k] / (n - 1), cell_size)
    if not cells:
        raise EmptyMapError(f"No cell reached {min_points} points")
    ndt = NdtMap(cell_size, cells, origin=origin, min_points=min_points)
    logger.info("Built NDT map: %d cells from %d points (cell size %.2f m)", len(ndt), len(pts), cell_size)
    return ndt


def _transform(pts: np.ndarray, xi: np.ndarray) -> np.ndarray:
    return pts @ rotation(float(xi[2])).T + xi[:2]


def ndt_score(
    ndt: NdtMap, cloud: PointCloud | np.ndarray, pose: Pose | np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """
    Summed negative per-point Gaussian score with analytic gradient and Hessian
    over (x, y, yaw). Points in empty cells contribute nothing.
    """
    xi = np.array(pose.as_tuple() if isinstance(pose, Pose) else pose, dtype=float)
    pts = _points(cloud)
    grad = np.zeros(3)
    hess = np.zeros((3, 3))
    if len(pts) == 0:
        return 0.0, grad, hess

    p = _transform(pts, xi)
    rows = ndt.associate(p)
    mask = rows >= 0
    if not mask.any():
        return 0.0, grad, hess
    x = pts[mask]
    rows = rows[mask]
    d = p[mask] - ndt._means[rows]
    A = ndt._inv[rows]

    c, s = math.cos(xi[2]), math.sin(xi[2])
    # d p / d yaw and d^2 p / d yaw^2
    jy = np.column_stack([-s * x[:, 0] - c * x[:, 1], c * x[:, 0] - s * x[:, 1]])
    hyy = np.column_stack([-c * x[:, 0] + s * x[:, 1], -s * x[:, 0] - c * x[:, 1]])

    Ad = np.einsum("nij,nj->ni", A, d)
    q = np.einsum("ni,ni->n", d, Ad)
    e = np.exp(-0.5 * q)
    score = -float(e.sum())

    # g_k = d^T A J_k for the three pose coordinates.
    g = np.column_stack([Ad[:, 0], Ad[:, 1], np.einsum("ni,ni->n", Ad, jy)])
    grad = (e[:, None] * g).sum(axis=0)

    J = np.stack([
        np.tile([1.0, 0.0], (len(x), 1)),
        np.tile([0.0, 1.0], (len(x), 1)),
        jy,
    ], axis=2)  # (n, 2, 3)
    JAJ = np.einsum("nai,nab,nbj->nij", J, A, J)
    second = np.zeros((len(x), 3, 3))
    second[:, 2, 2] = np.einsum("ni,ni->n", Ad, hyy)
    per_point = -g[:, :, None] * g[:, None, :] + JAJ + second
    hess = (e[:, None, None] * per_point).sum(axis=0)
    return score, grad, hess


def fit_ratio(ndt: NdtMap, cloud: PointCloud | np.ndarray, pose: Pose) -> tuple[int, float]:
    """(points in populated cells, share of those within 3 sigma of their cell)."""
    pts = _transform(_points(cloud), np.array(pose.as_tuple()))
    rows = ndt.associate(pts)
    mask = rows >= 0
    n = int(mask.sum())
    if n == 0:
        return 0, 0.0
    d = pts[mask] - ndt._means[rows[mask]]
    q = np.einsum("ni,nij,nj->n", d, ndt._inv[rows[mask]], d)
    return n, float((q < FIT_MAHALANOBIS_SQ).mean())


def _newton(
    ndt: NdtMap, pts: np.ndarray, xi: np.ndarray, max_iterations: int
) -> tuple[np.ndarray, float, int, bool]:
    iterations = 0
    converged = False
    score, grad, hess = ndt_score(ndt, pts, xi)
    for _ in range(max_iterations):
        lam = 0.0
        while True:
            try:
                factor = cho_factor(hess + lam * np.eye(3))
                break
            except LinAlgError:
                lam = 1e-6 if lam == 0.0 else lam * 2.0
        step = -cho_solve(factor, grad)

        trans = math.hypot(step[0], step[1])
        scale = 1.0
        if trans > MAX_TRANSLATION_STEP:
            scale = MAX_TRANSLATION_STEP / trans
        if abs(step[2]) * scale > MAX_YAW_STEP:
            scale = MAX_YAW_STEP / abs(step[2])
        step = step * scale
        if math.hypot(step[0], step[1]) < TRANSLATION_TOL and abs(step[2]) < YAW_TOL:
            converged = True
            break

        slope = float(grad @ step)
        alpha = 1.0
        accepted = False
        while alpha >= 1e-3:
            candidate = xi + alpha * step
            cand_score, cand_grad, cand_hess = ndt_score(ndt, pts, candidate)
            if cand_score <= score + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5

        iterations += 1
        if not accepted:
            logger.debug("Line search failed after %d iterations", iterations)
            break
        xi, score, grad, hess = candidate, cand_score, cand_grad, cand_hess
    return xi, score, iterations, converged


def ndt_match(
    ndt: NdtMap,
    cloud: PointCloud | np.ndarray,
    initial: Pose,
    *,
    max_iterations: int = MAX_ITERATIONS,
    coarse_to_fine: bool = True,
) -> PoseEstimate:
    """Newton iteration on `ndt_score` from `initial`; the pose is the sensor pose in the map."""
    if len(ndt) == 0:
        raise EmptyMapError("NDT map has no cells")
    pts = _points(cloud)
    in_cells, ratio = fit_ratio(ndt, pts, initial)
    if in_cells == 0:
        raise NoOverlapError(f"No scan point lands in a populated cell at {initial}")

    xi = np.array(initial.as_tuple(), dtype=float)
    total = 0
    if coarse_to_fine and ratio < COARSE_FIT_RATIO:
        for factor in COARSE_FACTORS:
            coarse = ndt.coarsen(factor)
            if len(coarse) == 0:
                continue
            if fit_ratio(coarse, pts, Pose(*xi))[0] == 0:
                continue
            xi, _, iters, _ = _newton(coarse, pts, xi, max(1, max_iterations // 3))
            total += iters
        logger.debug("Coarse levels used %d iterations", total)

    xi, score, iters, converged = _newton(ndt, pts, xi, max_iterations)
    total += iters
    pose = Pose(float(xi[0]), float(xi[1]), wrap_angle(float(xi[2])))
    _, final_ratio = fit_ratio(ndt, pts, pose)
    return PoseEstimate(pose=pose, score=score, iterations=total, converged=converged, fit_ratio=final_ratio)


def predict_initial(prev: PoseEstimate, odo: OdometryDelta) -> Pose:
    """Advance along the previous heading, then rotate. Only a converged estimate is a valid prior."""
    if not prev.converged:
        raise ValueError("predict_initial needs a converged previous estimate")
    p = prev.pose
    return Pose(
        p.x + odo.d_translation * math.cos(p.yaw),
        p.y + odo.d_translation * math.sin(p.yaw),
        wrap_angle(p.yaw + odo.d_yaw),
    )


def sensor_to_ego(sensor_in_map: Pose, ext: Extrinsic) -> Pose:
    return sensor_in_map.compose(ext.T_lidar.inverse())


@dataclass(frozen=True, slots=True)
class LocalizationUpdate:
    estimate: Optional[PoseEstimate]
    lost: bool
    reason: str = ""


class NdtLocalizer:
    """
    Per-run tracker: seeded once, extrapolated with odometry every tick and
    corrected by NDT matching whenever a scan arrives.
    """

    def __init__(
        self,
        ndt: NdtMap,
        extrinsic: Extrinsic,
        *,
        downsample_radius: float = 0.0,
        min_fit_ratio: float = 0.3,
    ) -> None:
        self._map = ndt
        self._ext = extrinsic
        self._radius = downsample_radius
        self._min_fit = min_fit_ratio
        self._estimate: Optional[PoseEstimate] = None
        self.lost = True

    @property
    def estimate(self) -> Optional[PoseEstimate]:
        return self._estimate

    @property
    def pose(self) -> Optional[Pose]:
        return self._estimate.pose if self._estimate is not None else None

    def seed(self, pose: Pose) -> None:
        self._estimate = PoseEstimate(pose=pose, converged=True)
        self.lost = False
        logger.info("Localizer seeded at (%.2f, %.2f, %.3f)", pose.x, pose.y, pose.yaw)

    def on_odometry(self, odo: OdometryDelta) -> None:
        if self._estimate is None or self.lost:
            return
        self._estimate = replace(self._estimate, pose=predict_initial(self._estimate, odo))

    def on_scan(self, cloud: PointCloud) -> LocalizationUpdate:
        if self._estimate is None or self.lost:
            return LocalizationUpdate(estimate=None, lost=True, reason="not seeded")
        if self._radius > 0:
            cloud = downsample(cloud, self._radius)
        guess = self._estimate.pose.compose(self._ext.T_lidar)
        try:
            result = ndt_match(self._map, cloud, guess)
        except NoOverlapError as e:
            self.lost = True
            logger.warning("Localization lost: %s", e)
            return LocalizationUpdate(estimate=None, lost=True, reason="no_overlap")
        if result.fit_ratio < self._min_fit:
            self.lost = True
            logger.warning("Localization lost: fit ratio %.2f below %.2f", result.fit_ratio, self._min_fit)
            return LocalizationUpdate(estimate=None, lost=True, reason="poor_fit")
        if not result.converged:
            # keep dead reckoning from the last trusted estimate
            logger.debug("NDT match did not converge after %d iterations", result.iterations)
            return LocalizationUpdate(estimate=self._estimate, lost=False, reason="not_converged")
        self._estimate = replace(result, pose=sensor_to_ego(result.pose, self._ext))
        return LocalizationUpdate(estimate=self._estimate, lost=False)


def accumulate(clouds: Iterable[tuple[PointCloud, Pose]]) -> PointCloud:
    """Concatenate posed clouds into one cloud in the map frame."""
    parts = [pose.transform_points(_points(c)) for c, pose in clouds]
    return PointCloud(np.vstack(parts) if parts else np.zeros((0, 2)))
