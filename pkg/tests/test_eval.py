import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pillarcoral.core import Box3D, ClassId
from pillarcoral.errors import ConfigError, FrameMismatch
from pillarcoral.evaluation import (
    EvalConfig, EvalReport, Interpolation, aos, average_precision, bev_iou, evaluate, iou3d,
)
from pillarcoral.geometry import bev_corners, nms

from conftest import car, dataset, frame, ped


def box(x, y, l, w, yaw, z=0.0, h=1.0, cls=ClassId.Car, score=None):
    return Box3D((x, y, z), (l, w, h), yaw, cls, score)


def raster_iou(a: Box3D, b: Box3D, n=1000) -> float:
    ca, cb = bev_corners(a.as_array()), bev_corners(b.as_array())
    both = np.vstack([ca, cb])
    lo, hi = both.min(axis=0), both.max(axis=0)
    xs = lo[0] + (np.arange(n) + 0.5) * (hi[0] - lo[0]) / n
    ys = lo[1] + (np.arange(n) + 0.5) * (hi[1] - lo[1]) / n
    gx, gy = np.meshgrid(xs, ys)

    def inside(bx: Box3D):
        c, s = math.cos(bx.yaw), math.sin(bx.yaw)
        dx, dy = gx - bx.center[0], gy - bx.center[1]
        return (np.abs(c * dx + s * dy) <= bx.size[0] / 2) & (np.abs(-s * dx + c * dy) <= bx.size[1] / 2)

    ia, ib = inside(a), inside(b)
    return float((ia & ib).sum() / (ia | ib).sum())


def test_iou_hand_cases():
    a = box(0, 0, 1, 1, 0)
    assert abs(bev_iou(a, a) - 1.0) <= 1e-12
    assert bev_iou(a, box(100, 0, 1, 1, 0)) == 0.0
    assert abs(bev_iou(a, box(0.5, 0, 1, 1, 0)) - 1 / 3) <= 1e-12
    assert abs(iou3d(a, box(0.5, 0, 1, 1, 0)) - 1 / 3) <= 1e-12
    assert iou3d(a, box(0, 0, 1, 1, 0, z=1.0)) == 0.0
    assert abs(iou3d(a, a) - 1.0) <= 1e-12


def test_iou_matches_rasterization_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        a = box(*rng.uniform(-1, 1, 2), *rng.uniform(0.5, 3.0, 2), rng.uniform(-math.pi, math.pi))
        b = box(*rng.uniform(-1, 1, 2), *rng.uniform(0.5, 3.0, 2), rng.uniform(-math.pi, math.pi))
        worst = max(worst, abs(bev_iou(a, b) - raster_iou(a, b)))
    assert worst < 5e-3


@given(st.integers(0, 2**31), st.floats(-math.pi, math.pi))
def test_iou_symmetry_and_rotation_invariance(seed, theta):
    rng = np.random.default_rng(seed)
    rows = [(*rng.uniform(-2, 2, 2), *rng.uniform(0.3, 3.0, 2), rng.uniform(-math.pi, math.pi)) for _ in range(2)]
    a, b = (box(*r) for r in rows)
    v = bev_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert abs(v - bev_iou(b, a)) <= 1e-12
    c, s = math.cos(theta), math.sin(theta)

    def rot(r):
        x, y, l, w, yaw = r
        return box(c * x - s * y, s * x + c * y, l, w, yaw + theta)

    assert abs(bev_iou(rot(rows[0]), rot(rows[1])) - v) <= 1e-9


def test_ap_hand_cases():
    g = [car(0, 0), car(10, 0)]
    assert average_precision([car(0, 0, score=0.9)], [car(0, 0)]) == 100.0
    assert average_precision([], g) == 0.0
    preds = [car(0, 0, score=0.9), car(30, 30, score=0.8)]
    ap = average_precision(preds, g, interpolation=Interpolation.Points11)
    assert abs(ap - 600 / 11) <= 1e-9
    assert abs(ap - 54.5454) < 1e-4


def test_aos_hand_cases():
    g = [car(0, 0)]
    assert aos([car(0, 0, score=0.5)], g) == average_precision([car(0, 0, score=0.5)], g) == 100.0
    flipped = [car(0, 0, yaw=math.pi, score=0.5)]
    assert average_precision(flipped, g) == 100.0
    assert aos(flipped, g) == pytest.approx(0.0, abs=1e-12)
    quarter = [box(0, 0, 2, 2, math.pi / 2, score=0.5)]
    square = [box(0, 0, 2, 2, 0.0)]
    assert aos(quarter, square) == pytest.approx(average_precision(quarter, square) / 2, abs=1e-12)


def random_case(rng, n_frames=5):
    gts, preds = [], []
    for _ in range(n_frames):
        g = [car(*rng.uniform(-20, 20, 2), rng.uniform(-math.pi, math.pi)) for _ in range(rng.integers(0, 4))]
        p = [car(b.center[0] + rng.normal(0, 0.8), b.center[1] + rng.normal(0, 0.8), b.yaw + rng.normal(0, 0.5),
                 score=float(rng.choice([0.2, 0.4, 0.6, 0.8, rng.uniform()])))
             for b in g if rng.uniform() < 0.8]
        p += [car(*rng.uniform(-20, 20, 2), score=float(rng.uniform())) for _ in range(rng.integers(0, 3))]
        gts.append(g)
        preds.append(p)
    return preds, gts


def brute_force_ap(preds, gts, threshold, n_points):
    """Enumerate every score threshold, rematch from scratch and interpolate."""
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return 0.0
    points = []
    for t in sorted({p.score for ps in preds for p in ps}, reverse=True):
        tp = fp = 0
        for ps, g in zip(preds, gts):
            kept = sorted((p for p in ps if p.score >= t), key=lambda p: -p.score)
            used = set()
            for p in kept:
                best, best_j = -1.0, None
                for j, gt in enumerate(g):
                    if j not in used:
                        v = bev_iou(p, gt)
                        if v > best:
                            best, best_j = v, j
                if best_j is not None and best >= threshold:
                    used.add(best_j)
                    tp += 1
                else:
                    fp += 1
        points.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for r in np.linspace(0, 1, n_points):
        total += max((p for rec, p in points if rec >= r - 1e-12), default=0.0)
    return 100 * total / n_points


@pytest.mark.parametrize("seed", range(10))
def test_dataset_ap_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_case(rng)
    ds = dataset([frame(f"{i:06d}", g) for i, g in enumerate(gts)])
    report = evaluate({f"{i:06d}": p for i, p in enumerate(preds)}, ds)
    assert report["car_bev@0.50"] == pytest.approx(brute_force_ap(preds, gts, 0.5, 41), abs=1e-9)
    assert report["car_bev@0.70"] == pytest.approx(brute_force_ap(preds, gts, 0.7, 41), abs=1e-9)


@given(st.integers(0, 2**31))
def test_aos_never_exceeds_ap(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_case(rng)
    ds = dataset([frame(f"{i:06d}", g) for i, g in enumerate(gts)])
    r = evaluate({f"{i:06d}": p for i, p in enumerate(preds)}, ds)
    assert 0 <= r["car_aos"] <= r["car_bev@0.50"] + 1e-9 <= 100 + 1e-9


@given(st.integers(0, 2**31))
def test_lowest_score_false_positive_never_helps(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_case(rng, 1)
    g = gts[0]
    base = average_precision(preds[0], g)
    low = min((p.score for p in preds[0]), default=1.0) / 2
    assert average_precision(preds[0] + [car(500, 500, score=low)], g) <= base + 1e-12


def test_evaluate_perfect_and_empty():
    gts = [[car(0, 0), ped(5, 5)], [car(-5, 3, 1.0)]]
    ds = dataset([frame(f"{i}", g) for i, g in enumerate(gts)])
    perfect = {f"{i}": [Box3D(b.center, b.size, b.yaw, b.class_id, 0.9) for b in g] for i, g in enumerate(gts)}
    r = evaluate(perfect, ds)
    assert all(row.value == 100.0 for row in r.rows.values())
    assert list(r.rows) == ["car_bev@0.50", "car_bev@0.70", "car_3d@0.50", "car_3d@0.70", "car_aos",
                            "ped_bev@0.25", "ped_bev@0.50", "ped_3d@0.25", "ped_3d@0.50", "ped_aos"]
    empty = evaluate({"0": [], "1": []}, ds)
    assert all(row.value == 0.0 for row in empty.rows.values())
    with pytest.raises(FrameMismatch):
        evaluate({"0": []}, ds)


def test_class_strict_matching():
    assert average_precision([ped(0, 0, score=0.9)], [car(0, 0)]) == 0.0


def test_report_csv_round_trip(tmp_path):
    ds = dataset([frame("a", [car()])])
    r = evaluate({"a": [car(0.3, 0, score=0.7)]}, ds)
    r.to_csv(tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text()
    assert text.startswith("metric,value,tp,fp,fn\n")
    back = EvalReport.from_csv(tmp_path / "r.csv")
    assert list(back.rows) == list(r.rows)
    assert "delta" in r.format_table(back)


def test_config_validation():
    with pytest.raises(ConfigError):
        EvalConfig(thresholds={"Car": {"bev": (0.0,)}})
    with pytest.raises(ConfigError):
        EvalConfig(thresholds={"Truck": {"bev": (0.5,)}})
    assert EvalConfig(interpolation="11").interpolation is Interpolation.Points11


def test_nms_keeps_highest_of_overlapping():
    boxes = [car(0, 0), car(0.2, 0), car(10, 0)]
    kept = nms(boxes, np.array([0.5, 0.9, 0.3]), 0.5)
    assert kept.tolist() == [1, 2]
