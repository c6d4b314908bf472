"""Pillarization: group points into x-y grid columns and build the stacked
``(D, P, N)`` pillar tensor; scatter per-pillar features back to a
``(C, H, W)`` pseudo-image.

Grid convention: ``col = floor((x - x_min) / dx)`` indexes the W axis and
``row = floor((y - y_min) / dy)`` the H axis; cells are half-open.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PointCloud, RangeConfig
from .errors import ConfigError, DimensionMismatch, OutOfRange

DECORATED_DIM = 9


@dataclass(frozen=True)
class PillarGridConfig:
    range: RangeConfig = field(default_factory=RangeConfig)
    pillar_size: tuple[float, float] = (0.25, 0.25)
    max_points_per_pillar: int = 60
    max_pillars: int = 12000
    point_feature_dim: int = DECORATED_DIM

    def __post_init__(self):
        dx, dy = self.pillar_size
        if dx <= 0 or dy <= 0:
            raise ConfigError(f"pillar size must be positive, got {self.pillar_size}")
        for extent, step, name in ((self.range.x_max - self.range.x_min, dx, "x"),
                                   (self.range.y_max - self.range.y_min, dy, "y")):
            cells = extent / step
            if abs(cells - round(cells)) > 1e-9 * max(1.0, cells):
                raise ConfigError(f"{name} extent {extent} is not a multiple of pillar size {step}")
        if self.max_points_per_pillar < 1 or self.max_pillars < 1:
            raise ConfigError("max_points_per_pillar and max_pillars must be >= 1")
        if self.point_feature_dim < 4:
            raise ConfigError("point_feature_dim must be >= 4")
        if self.point_feature_dim != DECORATED_DIM:
            raise ConfigError(f"only the {DECORATED_DIM}-feature decoration is implemented")

    @property
    def grid_width(self) -> int:
        return int(round((self.range.x_max - self.range.x_min) / self.pillar_size[0]))

    @property
    def grid_height(self) -> int:
        return int(round((self.range.y_max - self.range.y_min) / self.pillar_size[1]))

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.grid_height, self.grid_width

    def cell_center(self, row, col):
        dx, dy = self.pillar_size
        return (self.range.x_min + (np.asarray(col) + 0.5) * dx,
                self.range.y_min + (np.asarray(row) + 0.5) * dy)


@dataclass(frozen=True)
class PillarTensor:
    features: np.ndarray  # (D, P, N)
    pillar_coords: np.ndarray  # (P, 2) int rows of (row, col)
    pillar_counts: np.ndarray  # (P,)

    @property
    def num_pillars(self) -> int:
        return self.features.shape[1]

    @property
    def point_mask(self) -> np.ndarray:
        n = self.features.shape[2]
        return np.arange(n)[None, :] < self.pillar_counts[:, None]


@dataclass(frozen=True)
class PseudoImage:
    data: np.ndarray  # (C, H, W)


def grid_cells(xyz: np.ndarray, cfg: PillarGridConfig) -> tuple[np.ndarray, np.ndarray]:
    dx, dy = cfg.pillar_size
    col = np.floor((xyz[:, 0] - cfg.range.x_min) / dx).astype(np.int64)
    row = np.floor((xyz[:, 1] - cfg.range.y_min) / dy).astype(np.int64)
    # guard against x_max - eps rounding up to W
    np.clip(col, 0, cfg.grid_width - 1, out=col)
    np.clip(row, 0, cfg.grid_height - 1, out=row)
    return row, col


def decorate_point(point, pillar_center, cloud_mean) -> np.ndarray:
    """Nine-feature decoration of one point: raw, offset to centroid, offset to cell center."""
    x, y, z, i = (float(v) for v in point[:4])
    mx, my, mz = (float(v) for v in cloud_mean)
    px, py = (float(v) for v in pillar_center)
    return np.array([x, y, z, i, x - mx, y - my, z - mz, x - px, y - py])


def decorate_points(points: np.ndarray, centers: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Vectorized :func:`decorate_point` over (m, 4) points with per-point centers/means."""
    points = np.asarray(points, dtype=np.float64)
    return np.concatenate([points[:, :4], points[:, :3] - means, points[:, :2] - centers], axis=1)


def pillarize(cloud: PointCloud, cfg: PillarGridConfig, rng_seed: int = 0) -> PillarTensor:
    n_slots = cfg.max_points_per_pillar
    pts = np.asarray(cloud.points, dtype=np.float64)
    if len(pts) and not np.all(cfg.range.contains(pts)):
        raise OutOfRange("cloud has points outside the grid range; clip_to_range first")
    if len(pts) == 0:
        return PillarTensor(np.zeros((cfg.point_feature_dim, 0, n_slots)),
                            np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64))

    row, col = grid_cells(pts, cfg)
    cell = row * cfg.grid_width + col
    order = np.argsort(cell, kind="stable")
    cells_sorted = cell[order]
    uniq, start, counts = np.unique(cells_sorted, return_index=True, return_counts=True)
    # most populated first, ties broken by row-major cell index
    rank = np.lexsort((uniq, -counts))[: cfg.max_pillars]

    rng = np.random.default_rng(rng_seed)
    chosen, owner = [], []
    for p, k in enumerate(rank):
        idx = order[start[k]: start[k] + counts[k]]
        if counts[k] > n_slots:
            idx = idx[np.sort(rng.choice(counts[k], n_slots, replace=False))]
        chosen.append(idx)
        owner.append(np.full(len(idx), p))
    chosen = np.concatenate(chosen)
    owner = np.concatenate(owner)
    n_pillars = len(rank)

    kept_counts = np.bincount(owner, minlength=n_pillars)
    slot = np.arange(len(owner)) - np.repeat(np.cumsum(kept_counts) - kept_counts, kept_counts)

    sel = pts[chosen]
    means = np.stack([np.bincount(owner, weights=sel[:, a], minlength=n_pillars) for a in range(3)], axis=1)
    means /= kept_counts[:, None]
    prow = uniq[rank] // cfg.grid_width
    pcol = uniq[rank] % cfg.grid_width
    cx, cy = cfg.cell_center(prow, pcol)
    centers = np.stack([cx, cy], axis=1)

    decorated = decorate_points(sel, centers[owner], means[owner])
    features = np.zeros((cfg.point_feature_dim, n_pillars, n_slots))
    features[:, owner, slot] = decorated.T
    return PillarTensor(features, np.stack([prow, pcol], axis=1).astype(np.int64), kept_counts.astype(np.int64))


def scatter(pillar_features: np.ndarray, coords: np.ndarray, cfg: PillarGridConfig) -> PseudoImage:
    """Write column p of a (C, P) feature array to grid cell ``coords[p]``."""
    feats = np.asarray(pillar_features, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if feats.ndim != 2 or feats.shape[1] != len(coords):
        raise DimensionMismatch(f"features {feats.shape} do not match {len(coords)} pillar coordinates")
    h, w = cfg.grid_shape
    if len(coords) and (coords.min() < 0 or coords[:, 0].max() >= h or coords[:, 1].max() >= w):
        raise DimensionMismatch(f"pillar coordinates outside the {h}x{w} grid")
    img = np.zeros((feats.shape[0], h, w))
    img[:, coords[:, 0], coords[:, 1]] = feats
    return PseudoImage(img)


def full_scale_grid() -> PillarGridConfig:
    """The +-50 m, 0.25 m, 60 points-per-pillar grid."""
    return PillarGridConfig(RangeConfig(-50.0, 50.0, -50.0, 50.0, -3.0, 1.0), (0.25, 0.25), 60, 12000)


def desk_grid() -> PillarGridConfig:
    return PillarGridConfig(RangeConfig(-8.0, 8.0, -8.0, 8.0, -3.0, 1.0), (0.5, 0.5), 32, 1024)
