"""Rotated-box geometry on top of the compiled/pure kernels."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .core import Box3D, boxes_to_array


def bev_rows(boxes: np.ndarray) -> np.ndarray:
    """(n, 7) box array -> (n, 5) ``x, y, l, w, yaw`` rows for the kernels."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    return np.ascontiguousarray(boxes[:, [0, 1, 3, 4, 6]])


def bev_corners(box: np.ndarray) -> np.ndarray:
    """Counter-clockwise BEV corners (4, 2) of a single 7-vector box."""
    x, y, _, l, w, _, yaw = np.asarray(box, dtype=np.float64)
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def bev_iou_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise BEV IoU between two (n, 7) and (m, 7) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    return kernels.bev_iou_matrix(bev_rows(a), bev_rows(b))


def iou3d_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    bev = bev_iou_arrays(a, b)
    area_a = a[:, 3] * a[:, 4]
    area_b = b[:, 3] * b[:, 4]
    # recover the intersection area from IoU: inter = iou * (A + B) / (1 + iou)
    inter_bev = bev * (area_a[:, None] + area_b[None, :]) / (1.0 + bev)
    top = np.minimum((a[:, 2] + a[:, 5] / 2)[:, None], (b[:, 2] + b[:, 5] / 2)[None, :])
    bot = np.maximum((a[:, 2] - a[:, 5] / 2)[:, None], (b[:, 2] - b[:, 5] / 2)[None, :])
    dz = np.clip(top - bot, 0.0, None)
    inter = inter_bev * dz
    vol_a = area_a * a[:, 5]
    vol_b = area_b * b[:, 5]
    union = vol_a[:, None] + vol_b[None, :] - inter
    np.divide(inter, union, out=out, where=union > 0)
    return np.clip(out, 0.0, 1.0)


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    return float(kernels.intersection_area(bev_rows(a.as_array())[0], bev_rows(b.as_array())[0]))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated-rectangle IoU of the two boxes' ground-plane footprints."""
    inter = bev_intersection_area(a, b)
    union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou3d(a: Box3D, b: Box3D) -> float:
    inter_bev = bev_intersection_area(a, b)
    top = min(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2)
    bot = max(a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2)
    inter = inter_bev * max(top - bot, 0.0)
    vol_a = a.size[0] * a.size[1] * a.size[2]
    vol_b = b.size[0] * b.size[1] * b.size[2]
    return float(min(max(inter / (vol_a + vol_b - inter), 0.0), 1.0))


def points_in_box_mask(xyz: np.ndarray, box: np.ndarray, scale=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Inclusive containment of points in a 7-vector box, optionally scaled per axis."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    x, y, z, l, w, h, yaw = np.asarray(box, dtype=np.float64)
    dx = xyz[:, 0] - x
    dy = xyz[:, 1] - y
    c, s = np.cos(yaw), np.sin(yaw)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (
        (np.abs(lx) <= l * scale[0] / 2)
        & (np.abs(ly) <= w * scale[1] / 2)
        & (np.abs(xyz[:, 2] - z) <= h * scale[2] / 2)
    )


def nms(boxes: Sequence[Box3D] | np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Rotated BEV non-maximum suppression; returns kept indices by descending score."""
    arr = boxes_to_array(boxes) if not isinstance(boxes, np.ndarray) else boxes
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    return kernels.nms_bev(bev_rows(arr), order, float(iou_threshold))
