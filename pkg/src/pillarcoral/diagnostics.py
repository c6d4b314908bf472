"""Dataset statistics and simulated-vs-real gap measurements."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Box3D, ClassId, Dataset, PointCloud
from .errors import IoError
from .geometry import points_in_box_mask


@dataclass(frozen=True)
class PolarDensityMap:
    range_bins: np.ndarray
    azimuth_bins: np.ndarray
    counts: np.ndarray  # raw box counts, (n_range, n_azimuth)
    log_scaled: bool = False

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def frequencies(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else np.zeros_like(self.counts, dtype=np.float64)

    @property
    def values(self) -> np.ndarray:
        """Emitted cell values: ``ln(1 + count)`` when log-scaled, else frequencies."""
        return np.log1p(self.counts) if self.log_scaled else self.frequencies


@dataclass(frozen=True)
class PointsPerBoxCurve:
    samples: list[tuple[float, int, ClassId]]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class GapReport:
    sim_points: tuple[int, float, int]  # min, median, max points per frame
    real_points: tuple[int, float, int]
    dropout_estimate: float
    shadow_coverage: float
    out_of_box_sim: dict[ClassId, float] = field(default_factory=dict)
    out_of_box_real: dict[ClassId, float] = field(default_factory=dict)
    paired: bool = True


def class_histogram(ds: Dataset) -> dict[ClassId, int]:
    hist: dict[ClassId, int] = {}
    for frame in ds.frames:
        for box in frame.boxes:
            hist[box.class_id] = hist.get(box.class_id, 0) + 1
    return dict(sorted(hist.items()))


def polar_density(ds: Dataset, n_range_bins: int = 20, n_azimuth_bins: int = 36,
                  log_scale: bool = False, max_range: float = 50.0) -> PolarDensityMap:
    if n_range_bins < 1 or n_azimuth_bins < 1:
        raise ValueError("bin counts must be >= 1")
    r_edges = np.linspace(0.0, max_range, n_range_bins + 1)
    a_edges = np.linspace(-math.pi, math.pi, n_azimuth_bins + 1)
    centers = np.array([b.center[:2] for f in ds.frames for b in f.boxes]).reshape(-1, 2)
    rng = np.hypot(centers[:, 0], centers[:, 1])
    az = np.arctan2(centers[:, 1], centers[:, 0])
    counts, _, _ = np.histogram2d(rng, az, bins=(r_edges, a_edges))
    return PolarDensityMap(r_edges, a_edges, counts.astype(np.int64), log_scale)


def points_in_box(cloud: PointCloud, box: Box3D) -> int:
    if len(cloud) == 0:
        return 0
    return int(np.count_nonzero(points_in_box_mask(cloud.xyz, box.as_array())))


def points_per_box_curve(ds: Dataset) -> PointsPerBoxCurve:
    samples = []
    for frame in ds.frames:
        for box in frame.boxes:
            samples.append((math.hypot(box.center[0], box.center[1]), points_in_box(frame.cloud, box), box.class_id))
    return PointsPerBoxCurve(samples)


def filter_gt_by_min_points(ds: Dataset, min_points: int) -> Dataset:
    """Drop boxes holding fewer than ``min_points`` points; clouds are untouched."""
    if min_points < 0:
        raise ValueError("min_points must be >= 0")
    if min_points == 0:
        return ds
    return ds.with_frames(
        f.replace(boxes=tuple(b for b in f.boxes if points_in_box(f.cloud, b) >= min_points))
        for f in ds.frames
    )


def _point_stats(ds: Dataset) -> tuple[int, float, int]:
    counts = [len(f.cloud) for f in ds.frames]
    if not counts:
        return 0, 0.0, 0
    return int(min(counts)), float(np.median(counts)), int(max(counts))


def out_of_box_counts(ds: Dataset, scale: float = 1.5, ground_clearance: float = 0.1) -> dict[ClassId, tuple[int, int]]:
    """Per class ``(outside, assigned)`` point counts.

    A point is assigned to the nearest box (BEV center distance) whose extents
    scaled by ``scale`` contain it, ignoring points within ``ground_clearance``
    of the box bottom; it counts as outside when the unscaled box misses it.
    """
    totals: dict[ClassId, list[int]] = {}
    for frame in ds.frames:
        if not frame.boxes or len(frame.cloud) == 0:
            continue
        xyz = frame.cloud.xyz.astype(np.float64)
        best = np.full(len(xyz), -1)
        best_d = np.full(len(xyz), np.inf)
        for k, box in enumerate(frame.boxes):
            arr = box.as_array()
            region = points_in_box_mask(xyz, arr, (scale, scale, scale))
            region &= xyz[:, 2] >= arr[2] - arr[5] / 2 + ground_clearance
            d = np.hypot(xyz[:, 0] - arr[0], xyz[:, 1] - arr[1])
            take = region & (d < best_d)
            best[take], best_d[take] = k, d[take]
        for k, box in enumerate(frame.boxes):
            sel = best == k
            if not np.any(sel):
                continue
            inside = points_in_box_mask(xyz[sel], box.as_array())
            acc = totals.setdefault(box.class_id, [0, 0])
            acc[0] += int(np.count_nonzero(~inside))
            acc[1] += int(np.count_nonzero(sel))
    return {c: (v[0], v[1]) for c, v in sorted(totals.items())}


def _fractions(counts: dict[ClassId, tuple[int, int]]) -> dict[ClassId, float]:
    return {c: (o / n if n else 0.0) for c, (o, n) in counts.items()}


def shadow_coverage(sim: Dataset, real: Dataset, near_radius: float = 5.0, n_azimuth_bins: int = 72) -> float:
    """Fraction of near-sensor azimuth bins occupied in sim but empty in real (paired frames)."""
    real_by_id = real.by_id()
    emptied, occupied = 0, 0
    edges = np.linspace(-math.pi, math.pi, n_azimuth_bins + 1)
    for f in sim.frames:
        g = real_by_id.get(f.frame_id)
        if g is None:
            continue
        occ = []
        for cloud in (f.cloud, g.cloud):
            xyz = cloud.xyz.astype(np.float64)
            near = np.hypot(xyz[:, 0], xyz[:, 1]) < near_radius
            az = np.arctan2(xyz[near, 1], xyz[near, 0])
            occ.append(np.histogram(az, bins=edges)[0] > 0)
        occupied += int(np.count_nonzero(occ[0]))
        emptied += int(np.count_nonzero(occ[0] & ~occ[1]))
    return emptied / occupied if occupied else 0.0


def gap_report(sim: Dataset, real: Dataset, near_radius: float = 5.0, n_azimuth_bins: int = 72,
               attribution_scale: float = 1.5) -> GapReport:
    sim_ids = [f.frame_id for f in sim.frames]
    paired = bool(sim_ids) and set(sim_ids) == set(f.frame_id for f in real.frames)
    if paired:
        real_by_id = real.by_id()
        sim_counts = np.array([len(f.cloud) for f in sim.frames], dtype=np.float64)
        real_counts = np.array([len(real_by_id[i].cloud) for i in sim_ids], dtype=np.float64)
    else:
        sim_counts = np.array([len(f.cloud) for f in sim.frames], dtype=np.float64)
        real_counts = np.array([len(f.cloud) for f in real.frames], dtype=np.float64)
    dropout = 0.0
    if sim_counts.size and real_counts.size and sim_counts.mean() > 0:
        dropout = float(np.clip(1.0 - real_counts.mean() / sim_counts.mean(), 0.0, 1.0))
    return GapReport(
        sim_points=_point_stats(sim),
        real_points=_point_stats(real),
        dropout_estimate=dropout,
        shadow_coverage=shadow_coverage(sim, real, near_radius, n_azimuth_bins) if paired else 0.0,
        out_of_box_sim=_fractions(out_of_box_counts(sim, attribution_scale)),
        out_of_box_real=_fractions(out_of_box_counts(real, attribution_scale)),
        paired=paired,
    )


# -- emission ------------------------------------------------------------------------

def _write_rows(path, header, rows) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def write_class_histogram(hist: dict[ClassId, int], path) -> Path:
    return _write_rows(path, ["class", "count"], [[c.name, n] for c, n in hist.items()])


def write_polar_density(pmap: PolarDensityMap, path) -> Path:
    values = pmap.values
    freqs = pmap.frequencies
    rows = []
    for i in range(len(pmap.range_bins) - 1):
        for j in range(len(pmap.azimuth_bins) - 1):
            rows.append([_fmt(pmap.range_bins[i]), _fmt(pmap.range_bins[i + 1]),
                         _fmt(pmap.azimuth_bins[j]), _fmt(pmap.azimuth_bins[j + 1]),
                         int(pmap.counts[i, j]), _fmt(freqs[i, j]), _fmt(values[i, j])])
    return _write_rows(path, ["range_lo", "range_hi", "azimuth_lo", "azimuth_hi", "count", "frequency", "value"], rows)


def write_points_per_box(curve: PointsPerBoxCurve, path) -> Path:
    return _write_rows(path, ["range", "points", "class"],
                       [[_fmt(r), n, c.name] for r, n, c in curve.samples])


def write_gap_report(report: GapReport, path) -> Path:
    rows = [
        ["sim_points_min", report.sim_points[0]],
        ["sim_points_median", _fmt(report.sim_points[1])],
        ["sim_points_max", report.sim_points[2]],
        ["real_points_min", report.real_points[0]],
        ["real_points_median", _fmt(report.real_points[1])],
        ["real_points_max", report.real_points[2]],
        ["dropout_estimate", _fmt(report.dropout_estimate)],
        ["shadow_coverage", _fmt(report.shadow_coverage)],
    ]
    for c, v in report.out_of_box_sim.items():
        rows.append([f"out_of_box_sim_{c.name.lower()}", _fmt(v)])
    for c, v in report.out_of_box_real.items():
        rows.append([f"out_of_box_real_{c.name.lower()}", _fmt(v)])
    return _write_rows(path, ["statistic", "value"], rows)
