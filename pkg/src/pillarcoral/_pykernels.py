"""Pure-Python twins of the compiled kernels.

Used when the extension is not built or when ``PILLARCORAL_PURE_PYTHON=1``.
"""
import math

import numpy as np


def _corners(x, y, l, w, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * l, 0.5 * w
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    return [(x + c * lx - s * ly, y + s * lx + c * ly) for lx, ly in local]


def _area(poly):
    acc = 0.0
    n = len(poly)
    for i in range(n):
        px, py = poly[i]
        qx, qy = poly[(i + 1) % n]
        acc += px * qy - qx * py
    return 0.5 * abs(acc)


def _clip_area(subject, clip):
    poly = list(subject)
    for e in range(4):
        if not poly:
            return 0.0
        x1, y1 = clip[e]
        x2, y2 = clip[(e + 1) % 4]
        ex, ey = x2 - x1, y2 - y1
        out = []
        n = len(poly)
        for i in range(n):
            px, py = poly[(i + n - 1) % n]
            qx, qy = poly[i]
            cs = ex * (py - y1) - ey * (px - x1)
            ce = ex * (qy - y1) - ey * (qx - x1)
            if ce >= 0.0:
                if cs < 0.0:
                    t = cs / (cs - ce)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif cs >= 0.0:
                t = cs / (cs - ce)
                out.append((px + t * (qx - px), py + t * (qy - py)))
        poly = out
    if len(poly) < 3:
        return 0.0
    return _area(poly)


def intersection_area(a_box, b_box):
    return _clip_area(_corners(*a_box[:5]), _corners(*b_box[:5]))


def _pair_iou(a, b):
    ra = 0.5 * math.sqrt(a[2] * a[2] + a[3] * a[3])
    rb = 0.5 * math.sqrt(b[2] * b[2] + b[3] * b[3])
    dx, dy = a[0] - b[0], a[1] - b[1]
    if dx * dx + dy * dy > (ra + rb) * (ra + rb):
        return 0.0
    inter = _clip_area(_corners(*a), _corners(*b))
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)


def bev_iou_matrix(a_in, b_in):
    a = np.ascontiguousarray(a_in, dtype=np.float64).reshape(-1, 5).tolist()
    b = np.ascontiguousarray(b_in, dtype=np.float64).reshape(-1, 5).tolist()
    out = np.zeros((len(a), len(b)))
    for i, ra in enumerate(a):
        for j, rb in enumerate(b):
            out[i, j] = _pair_iou(ra, rb)
    return out


def nms_bev(boxes_in, order_in, threshold):
    boxes = np.ascontiguousarray(boxes_in, dtype=np.float64).reshape(-1, 5).tolist()
    order = [int(k) for k in order_in]
    dead = [False] * len(boxes)
    keep = []
    for i, k in enumerate(order):
        if dead[k]:
            continue
        keep.append(k)
        for j in order[i + 1:]:
            if not dead[j] and _pair_iou(boxes[k], boxes[j]) > threshold:
                dead[j] = True
    return np.asarray(keep, dtype=np.int64)


def segment_max(x, starts):
    """Per-segment column maxima of ``x`` and the first row attaining each."""
    x = np.asarray(x, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.int64)
    n = x.shape[0]
    out = np.maximum.reduceat(x, starts, axis=0)
    seg = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, n]))
    rows = np.arange(n)[:, None]
    arg = np.minimum.reduceat(np.where(x == out[seg], rows, n), starts, axis=0)
    return out, arg.astype(np.int64)
