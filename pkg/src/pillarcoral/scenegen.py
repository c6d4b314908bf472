"""Deterministic synthetic LiDAR scenes and a simulated-to-real gap model.

Scenes are a flat ground plane with box-shaped cars and pedestrians. Points
come from single-return ray casting of a spinning multi-beam sensor at the
origin (slab intersection against boxes, plane intersection against ground).
:func:`realify` turns a simulated frame into a "real" one by point dropout,
ego-vehicle shadowing, box/point desynchronization and intensity flattening.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Box3D, ClassId, Dataset, Domain, Frame, PointCloud, RangeConfig
from .errors import ConfigError, DomainError

MASK64 = (1 << 64) - 1
# annotation margin so float32-rounded surface points stay inside their box
ANNOTATION_PAD = 1e-4

CAR_SIZE = (4.5, 1.8, 1.5)
PEDESTRIAN_SIZE = (0.6, 0.6, 1.7)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Mix a base seed with integer keys (frame index, stream id) into a 63-bit seed."""
    x = int(seed) & MASK64
    for k in keys:
        x = splitmix64(x ^ splitmix64(int(k) & MASK64))
    return x >> 1


@dataclass(frozen=True)
class LidarConfig:
    n_beams: int = 16
    vertical_fov: tuple[float, float] = (math.radians(-15.0), math.radians(15.0))
    azimuth_resolution: float = math.radians(0.4)
    max_range: float = 60.0
    sensor_height: float = 1.8

    def __post_init__(self):
        if self.n_beams < 1:
            raise ConfigError("n_beams must be >= 1")
        if self.azimuth_resolution <= 0:
            raise ConfigError("azimuth_resolution must be > 0")
        if self.max_range <= 0:
            raise ConfigError("max_range must be > 0")
        if self.sensor_height <= 0:
            raise ConfigError("sensor_height must be > 0")
        lo, hi = self.vertical_fov
        if not lo <= hi:
            raise ConfigError("vertical_fov must be (low, high)")

    def ray_directions(self) -> np.ndarray:
        """Unit direction vectors, beam-major then azimuth."""
        lo, hi = self.vertical_fov
        elev = np.linspace(lo, hi, self.n_beams) if self.n_beams > 1 else np.array([lo])
        n_az = int(math.floor(2 * math.pi / self.azimuth_resolution + 1e-9))
        az = -math.pi + self.azimuth_resolution * np.arange(n_az)
        e, a = np.meshgrid(elev, az, indexing="ij")
        ce = np.cos(e)
        return np.stack([ce * np.cos(a), ce * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)


def default_ego_footprint(sensor_height: float = 1.8) -> Box3D:
    # car body standing on the ground with the sensor 0.5 m above its roof
    height = max(sensor_height - 0.5, 0.2)
    return Box3D((0.0, 0.0, -sensor_height + height / 2), (4.5, 1.8, height), 0.0, ClassId.Car)


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    area: RangeConfig = field(default_factory=lambda: RangeConfig(-8.0, 8.0, -8.0, 8.0, -3.0, 1.0))
    n_cars: tuple[int, int] = (1, 3)
    n_pedestrians: tuple[int, int] = (0, 2)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    ego_footprint: Box3D = field(default_factory=default_ego_footprint)
    placement_gap: float = 0.3

    def __post_init__(self):
        for name in ("n_cars", "n_pedestrians"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must be a (min, max) count range, got {(lo, hi)}")


@dataclass(frozen=True)
class GapConfig:
    dropout_rate: float = 0.3
    ego_shadow: bool = True
    box_shift: tuple[float, float] = (0.0, 0.0)  # (probability, max offset in meters)
    intensity_flatten: bool = False
    flat_intensity: float = 0.5
    ego_footprint: Box3D | None = None

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1]")
        p, off = self.box_shift
        if not 0.0 <= p <= 1.0 or off < 0.0:
            raise ConfigError(f"box_shift must be (probability in [0,1], offset >= 0), got {self.box_shift}")
        if not 0.0 <= self.flat_intensity <= 1.0:
            raise ConfigError("flat_intensity must lie in [0, 1]")

    @classmethod
    def disabled(cls) -> GapConfig:
        return cls(dropout_rate=0.0, ego_shadow=False, box_shift=(0.0, 0.0), intensity_flatten=False)


# -- ray casting -------------------------------------------------------------------

def ray_box_entry(origin: np.ndarray, dirs: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Entry parameter t of rays ``origin + t * dirs`` into a 7-vector box (inf on miss).

    Rays starting inside the box report their exit instead of a hit at t <= 0.
    """
    x, y, z, l, w, h, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    o = np.asarray(origin, dtype=np.float64) - np.array([x, y, z])
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box frame
    lo = rot @ o
    ld = dirs @ rot.T
    half = np.array([l, w, h]) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - lo) / ld
        t2 = (half - lo) / ld
    tnear = np.nanmax(np.minimum(t1, t2), axis=1)
    tfar = np.nanmin(np.maximum(t1, t2), axis=1)
    # rays parallel to a slab they start outside of never hit
    parallel_miss = np.any((ld == 0.0) & (np.abs(lo) > half), axis=1)
    hit = (tfar >= tnear) & (tnear > 0.0) & ~parallel_miss
    return np.where(hit, tnear, np.inf)


def raycast(dirs: np.ndarray, boxes: np.ndarray, ground_z: float, max_range: float):
    """First-hit ray casting from the origin.

    Returns ``(points, hit)`` for rays that returned within ``max_range``;
    ``hit[i]`` is the box index or -1 for ground.
    """
    t_best = np.full(len(dirs), np.inf)
    who = np.full(len(dirs), -2, dtype=np.int64)
    with np.errstate(divide="ignore"):
        t_ground = np.where(dirs[:, 2] < 0.0, ground_z / dirs[:, 2], np.inf)
    sel = t_ground < t_best
    t_best[sel], who[sel] = t_ground[sel], -1
    for k, box in enumerate(np.asarray(boxes, dtype=np.float64).reshape(-1, 7)):
        t = ray_box_entry(np.zeros(3), dirs, box)
        sel = t < t_best
        t_best[sel], who[sel] = t[sel], k
    ok = t_best <= max_range
    pts = dirs[ok] * t_best[ok, None]
    hit = who[ok]
    ground = hit == -1
    pts[ground, 2] = ground_z  # exact plane height
    return pts, hit


def _place_objects(cfg: SceneConfig, rng: np.random.Generator) -> list[Box3D]:
    ground = -cfg.lidar.sensor_height
    ego = cfg.ego_footprint
    ego_r = 0.5 * math.hypot(ego.size[0], ego.size[1])
    placed: list[tuple[float, float, float]] = [(ego.center[0], ego.center[1], ego_r)]
    boxes: list[Box3D] = []
    n_cars = int(rng.integers(cfg.n_cars[0], cfg.n_cars[1] + 1))
    n_peds = int(rng.integers(cfg.n_pedestrians[0], cfg.n_pedestrians[1] + 1))
    kinds = [ClassId.Car] * n_cars + [ClassId.Pedestrian] * n_peds
    a = cfg.area
    for kind in kinds:
        base = CAR_SIZE if kind == ClassId.Car else PEDESTRIAN_SIZE
        jitter = rng.uniform(-0.08, 0.08, size=3)
        size = tuple(float(b * (1.0 + j)) for b, j in zip(base, jitter))
        r = 0.5 * math.hypot(size[0], size[1])
        if a.x_max - a.x_min <= 2 * r or a.y_max - a.y_min <= 2 * r:
            continue
        for _ in range(100):
            x = float(rng.uniform(a.x_min + r, a.x_max - r))
            y = float(rng.uniform(a.y_min + r, a.y_max - r))
            yaw = float(rng.uniform(-math.pi, math.pi))
            if all(math.hypot(x - px, y - py) > r + pr + cfg.placement_gap for px, py, pr in placed):
                placed.append((x, y, r))
                boxes.append(Box3D((x, y, ground + size[2] / 2), size, yaw, kind))
                break
    return boxes


def _intensity(hit: np.ndarray, boxes: list[Box3D], rng: np.random.Generator) -> np.ndarray:
    base = np.where(hit == -1, 0.15, 0.0)
    for k, b in enumerate(boxes):
        level = rng.uniform(0.7, 0.95) if b.class_id == ClassId.Car else rng.uniform(0.4, 0.55)
        base = np.where(hit == k, level, base)
    noise = rng.uniform(-0.05, 0.05, size=len(hit))
    return np.clip(base + noise, 0.0, 1.0)


def simulate(cfg: SceneConfig):
    """Ray-cast a scene; returns ``(boxes, points float64 (n, 3), hit ids, intensity)``."""
    rng = np.random.default_rng(cfg.seed)
    boxes = _place_objects(cfg, rng)
    dirs = cfg.lidar.ray_directions()
    arr = np.stack([b.as_array() for b in boxes]) if boxes else np.zeros((0, 7))
    pts, hit = raycast(dirs, arr, -cfg.lidar.sensor_height, cfg.lidar.max_range)
    inten = _intensity(hit, boxes, rng)
    return boxes, pts, hit, inten


def generate_scene(cfg: SceneConfig, frame_id: str = "000000") -> Frame:
    boxes, pts, _, inten = simulate(cfg)
    cloud = PointCloud(np.concatenate([pts, inten[:, None]], axis=1))
    gt = tuple(Box3D(b.center, tuple(s + 2 * ANNOTATION_PAD for s in b.size), b.yaw, b.class_id) for b in boxes)
    return Frame(cloud, gt, frame_id, Domain.Simulated)


def shadow_mask(xyz: np.ndarray, footprint: Box3D) -> np.ndarray:
    """True for points whose line of sight from the origin crosses the ego footprint."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if len(xyz) == 0:
        return np.zeros(0, dtype=bool)
    t = ray_box_entry(np.zeros(3), xyz, footprint.as_array())
    return t < 1.0


def realify(frame: Frame, gap: GapConfig, seed: int = 0) -> Frame:
    if frame.domain_tag != Domain.Simulated:
        raise DomainError(f"frame {frame.frame_id} is already {frame.domain_tag.value}")
    rng = np.random.default_rng(seed)
    pts = np.array(frame.cloud.points, dtype=np.float32)
    keep = rng.random(len(pts)) >= gap.dropout_rate if gap.dropout_rate > 0 else np.ones(len(pts), bool)
    if gap.ego_shadow:
        footprint = gap.ego_footprint or default_ego_footprint()
        keep &= ~shadow_mask(pts[:, :3], footprint)
    pts = pts[keep]

    boxes = list(frame.boxes)
    p_shift, max_off = gap.box_shift
    if p_shift > 0 and max_off > 0:
        shifted = []
        for b in boxes:
            u, ang, mag = rng.random(), rng.uniform(-math.pi, math.pi), rng.uniform(0.0, max_off)
            shifted.append(b.translated(mag * math.cos(ang), mag * math.sin(ang)) if u < p_shift else b)
        boxes = shifted

    if gap.intensity_flatten:
        pts[:, 3] = np.float32(gap.flat_intensity)
    return Frame(PointCloud(pts), tuple(boxes), frame.frame_id, Domain.Real)


def generate_dataset(scene_cfg: SceneConfig, gap_cfg: GapConfig, n_frames: int, seed: int,
                     split: str = "train") -> tuple[Dataset, Dataset]:
    """Paired simulated and real-ified datasets.

    The real training split carries no labels; the ``eval`` split keeps them.
    """
    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    if split not in ("train", "eval"):
        raise ConfigError(f"split must be 'train' or 'eval', got {split!r}")
    if gap_cfg.ego_footprint is None:
        gap_cfg = replace(gap_cfg, ego_footprint=scene_cfg.ego_footprint)
    sim_frames, real_frames = [], []
    for i in range(n_frames):
        fid = f"{i:06d}"
        frame = generate_scene(replace(scene_cfg, seed=derive_seed(seed, i, 0)), fid)
        real = realify(frame, gap_cfg, derive_seed(seed, i, 1))
        if split == "train":
            real = real.replace(boxes=())
        sim_frames.append(frame)
        real_frames.append(real)
    meta = {"split": split}
    return (Dataset(tuple(sim_frames), "sim", seed, dict(meta)),
            Dataset(tuple(real_frames), "real", seed, dict(meta)))
