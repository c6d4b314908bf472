# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: rotated BEV IoU, rotated NMS and segment max-pooling.

Boxes are rows ``(x, y, l, w, yaw)``. Must stay numerically identical to
``_pykernels``; the test suite compares both backends.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, fabs, sqrt

cnp.import_array()

DEF MAXV = 16


cdef inline void _corners(double x, double y, double l, double w, double yaw,
                          double* px, double* py) noexcept nogil:
    cdef double c = cos(yaw), s = sin(yaw)
    cdef double hl = 0.5 * l, hw = 0.5 * w
    cdef double lx[4]
    cdef double ly[4]
    cdef int i
    lx[0] = hl; ly[0] = hw
    lx[1] = -hl; ly[1] = hw
    lx[2] = -hl; ly[2] = -hw
    lx[3] = hl; ly[3] = -hw
    for i in range(4):
        px[i] = x + c * lx[i] - s * ly[i]
        py[i] = y + s * lx[i] + c * ly[i]


cdef inline double _area(double* px, double* py, int n) noexcept nogil:
    cdef double acc = 0.0
    cdef int i, j
    for i in range(n):
        j = (i + 1) % n
        acc += px[i] * py[j] - px[j] * py[i]
    return 0.5 * fabs(acc)


cdef double _clip_area(double* ax, double* ay, double* bx, double* by) noexcept nogil:
    cdef double sx[MAXV]
    cdef double sy[MAXV]
    cdef double tx[MAXV]
    cdef double ty[MAXV]
    cdef int n = 4, m, e, i
    cdef double x1, y1, x2, y2, ex, ey, cs, ce, px, py, qx, qy, t
    for i in range(4):
        sx[i] = ax[i]
        sy[i] = ay[i]
    for e in range(4):
        if n == 0:
            return 0.0
        x1 = bx[e]; y1 = by[e]
        x2 = bx[(e + 1) % 4]; y2 = by[(e + 1) % 4]
        ex = x2 - x1; ey = y2 - y1
        m = 0
        for i in range(n):
            px = sx[(i + n - 1) % n]; py = sy[(i + n - 1) % n]
            qx = sx[i]; qy = sy[i]
            cs = ex * (py - y1) - ey * (px - x1)
            ce = ex * (qy - y1) - ey * (qx - x1)
            if ce >= 0.0:
                if cs < 0.0:
                    t = cs / (cs - ce)
                    tx[m] = px + t * (qx - px); ty[m] = py + t * (qy - py); m += 1
                tx[m] = qx; ty[m] = qy; m += 1
            elif cs >= 0.0:
                t = cs / (cs - ce)
                tx[m] = px + t * (qx - px); ty[m] = py + t * (qy - py); m += 1
        n = m
        for i in range(n):
            sx[i] = tx[i]
            sy[i] = ty[i]
    if n < 3:
        return 0.0
    return _area(sx, sy, n)


cdef inline double _pair_iou(double[:, ::1] a, Py_ssize_t i, double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    cdef double ra = 0.5 * sqrt(a[i, 2] * a[i, 2] + a[i, 3] * a[i, 3])
    cdef double rb = 0.5 * sqrt(b[j, 2] * b[j, 2] + b[j, 3] * b[j, 3])
    cdef double dx = a[i, 0] - b[j, 0], dy = a[i, 1] - b[j, 1]
    cdef double inter, union_
    if dx * dx + dy * dy > (ra + rb) * (ra + rb):
        return 0.0
    _corners(a[i, 0], a[i, 1], a[i, 2], a[i, 3], a[i, 4], ax, ay)
    _corners(b[j, 0], b[j, 1], b[j, 2], b[j, 3], b[j, 4], bx, by)
    inter = _clip_area(ax, ay, bx, by)
    union_ = a[i, 2] * a[i, 3] + b[j, 2] * b[j, 3] - inter
    if union_ <= 0.0:
        return 0.0
    inter = inter / union_
    if inter > 1.0:
        return 1.0
    return inter


def intersection_area(a_box, b_box):
    """Overlap area of two rotated rectangles ``(x, y, l, w, yaw)``."""
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    _corners(a_box[0], a_box[1], a_box[2], a_box[3], a_box[4], ax, ay)
    _corners(b_box[0], b_box[1], b_box[2], b_box[3], b_box[4], bx, by)
    return _clip_area(ax, ay, bx, by)


def bev_iou_matrix(a_in, b_in):
    cdef double[:, ::1] a = np.ascontiguousarray(a_in, dtype=np.float64).reshape(-1, 5)
    cdef double[:, ::1] b = np.ascontiguousarray(b_in, dtype=np.float64).reshape(-1, 5)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for j in range(m):
                out[i, j] = _pair_iou(a, i, b, j)
    return out_arr


def nms_bev(boxes_in, order_in, double threshold):
    """Greedy suppression visiting rows in ``order``; returns kept row indices."""
    cdef double[:, ::1] boxes = np.ascontiguousarray(boxes_in, dtype=np.float64).reshape(-1, 5)
    cdef long[::1] order = np.ascontiguousarray(order_in, dtype=np.int64).astype(np.int_)
    cdef Py_ssize_t n = order.shape[0], i, j, k
    cdef char[::1] dead = np.zeros(boxes.shape[0], dtype=np.int8)
    keep = []
    for i in range(n):
        k = order[i]
        if dead[k]:
            continue
        keep.append(k)
        for j in range(i + 1, n):
            if not dead[order[j]] and _pair_iou(boxes, k, boxes, order[j]) > threshold:
                dead[order[j]] = 1
    return np.asarray(keep, dtype=np.int64)


def segment_max(double[:, ::1] x, long long[::1] starts):
    """Per-segment column maxima of ``x`` and the first row attaining each."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], s = starts.shape[0]
    out_arr = np.empty((s, c), dtype=np.float64)
    arg_arr = np.empty((s, c), dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef long long[:, ::1] arg = arg_arr
    cdef Py_ssize_t k, i, j, lo, hi
    with nogil:
        for k in range(s):
            lo = starts[k]
            hi = starts[k + 1] if k + 1 < s else n
            for j in range(c):
                out[k, j] = x[lo, j]
                arg[k, j] = lo
            for i in range(lo + 1, hi):
                for j in range(c):
                    if x[i, j] > out[k, j]:
                        out[k, j] = x[i, j]
                        arg[k, j] = i
    return out_arr, arg_arr
