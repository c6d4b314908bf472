"""Anchor grid, IoU matching and residual box encoding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..core import Box3D, boxes_to_array, normalize_yaw_array
from ..geometry import bev_iou_arrays
from ..pillar import PillarGridConfig
from .network import CLASS_ORDER, NetworkConfig

POSITIVE_MIN = 0
NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class AnchorGrid:
    boxes: np.ndarray  # (A, 7), ordered (row, col, class, yaw)
    class_index: np.ndarray  # (A,) index into CLASS_ORDER
    feature_shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.boxes)

    @classmethod
    def build(cls, grid: PillarGridConfig, net: NetworkConfig) -> AnchorGrid:
        h, w = grid.grid_shape
        fh, fw = h // 8, w // 8
        rng = grid.range
        cy = rng.y_min + (np.arange(fh) + 0.5) * (rng.y_max - rng.y_min) / fh
        cx = rng.x_min + (np.arange(fw) + 0.5) * (rng.x_max - rng.x_min) / fw
        per_cell = []
        classes = []
        for k, cid in enumerate(CLASS_ORDER):
            l, wd, ht = net.anchor_sizes[cid.name]
            for yaw in net.anchor_yaws:
                per_cell.append((l, wd, ht, net.anchor_z[cid.name], yaw))
                classes.append(k)
        a = len(per_cell)
        templ = np.array(per_cell, dtype=np.float64)
        boxes = np.zeros((fh, fw, a, 7))
        boxes[..., 0] = cx[None, :, None]
        boxes[..., 1] = cy[:, None, None]
        boxes[..., 2] = templ[:, 3]
        boxes[..., 3:6] = templ[:, 0:3]
        boxes[..., 6] = templ[:, 4]
        class_index = np.tile(np.array(classes), fh * fw)
        return cls(boxes.reshape(-1, 7), class_index, (fh, fw))

    def to_boxes(self) -> list[Box3D]:
        return [Box3D(tuple(b[:3]), tuple(b[3:6]), float(b[6]), CLASS_ORDER[k])
                for b, k in zip(self.boxes, self.class_index)]


@dataclass(frozen=True)
class MatchResult:
    assignment: np.ndarray  # (A,) gt index for positives, NEGATIVE or IGNORE otherwise
    max_iou: np.ndarray  # (A,)

    @property
    def positive(self) -> np.ndarray:
        return self.assignment >= POSITIVE_MIN

    @property
    def negative(self) -> np.ndarray:
        return self.assignment == NEGATIVE

    @property
    def ignore(self) -> np.ndarray:
        return self.assignment == IGNORE

    @property
    def n_pos(self) -> int:
        return int(np.count_nonzero(self.positive))


def match_anchors(anchors: AnchorGrid, gts: Sequence[Box3D], cfg: NetworkConfig) -> MatchResult:
    """Per-class BEV IoU matching with each GT's best anchor forced positive."""
    n = len(anchors)
    assignment = np.full(n, NEGATIVE, dtype=np.int64)
    max_iou = np.zeros(n)
    if not gts:
        return MatchResult(assignment, max_iou)
    gt_arr = boxes_to_array(gts)
    gt_cls = np.array([CLASS_ORDER.index(g.class_id) for g in gts])
    for k, cid in enumerate(CLASS_ORDER):
        a_idx = np.nonzero(anchors.class_index == k)[0]
        g_idx = np.nonzero(gt_cls == k)[0]
        if len(g_idx) == 0 or len(a_idx) == 0:
            continue
        iou = bev_iou_arrays(anchors.boxes[a_idx], gt_arr[g_idx])
        best_gt = iou.argmax(axis=1)
        best = iou[np.arange(len(a_idx)), best_gt]
        max_iou[a_idx] = best
        pos_t, neg_t = cfg.match_iou_pos[cid.name], cfg.match_iou_neg[cid.name]
        assign = np.where(best >= pos_t, g_idx[best_gt], np.where(best < neg_t, NEGATIVE, IGNORE))
        for j in range(len(g_idx)):
            col = iou[:, j]
            top = int(np.argmax(col))
            if col[top] > 0.0:
                assign[top] = g_idx[j]
        assignment[a_idx] = assign
    return MatchResult(assignment, max_iou)


def encode(gt: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """(n, 7) residuals of ground-truth boxes relative to their anchors."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    anchor = np.asarray(anchor, dtype=np.float64).reshape(-1, 7)
    diag = np.hypot(anchor[:, 3], anchor[:, 4])
    out = np.empty_like(gt)
    out[:, 0] = (gt[:, 0] - anchor[:, 0]) / diag
    out[:, 1] = (gt[:, 1] - anchor[:, 1]) / diag
    out[:, 2] = (gt[:, 2] - anchor[:, 2]) / anchor[:, 5]
    out[:, 3:6] = np.log(gt[:, 3:6] / anchor[:, 3:6])
    out[:, 6] = normalize_yaw_array(gt[:, 6] - anchor[:, 6])
    return out


def decode(deltas: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 7)
    anchor = np.asarray(anchor, dtype=np.float64).reshape(-1, 7)
    diag = np.hypot(anchor[:, 3], anchor[:, 4])
    out = np.empty_like(deltas)
    out[:, 0] = deltas[:, 0] * diag + anchor[:, 0]
    out[:, 1] = deltas[:, 1] * diag + anchor[:, 1]
    out[:, 2] = deltas[:, 2] * anchor[:, 5] + anchor[:, 2]
    out[:, 3:6] = np.exp(deltas[:, 3:6]) * anchor[:, 3:6]
    out[:, 6] = normalize_yaw_array(anchor[:, 6] + deltas[:, 6])
    return out


def split_direction(dtheta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fold a yaw residual into ``[-pi/2, pi/2]`` plus a half-turn direction bin."""
    dtheta = np.asarray(dtheta, dtype=np.float64)
    folded = dtheta - math.pi * np.round(dtheta / math.pi)
    return folded, (np.abs(dtheta - folded) > math.pi / 2).astype(np.int64)


@dataclass(frozen=True)
class Targets:
    """Training targets of one frame, precomputed from its match."""
    cls: np.ndarray  # (A, K) one-hot 0/1
    cls_weight: np.ndarray  # (A,) 0 on ignored anchors
    pos_index: np.ndarray  # (n_pos,)
    reg: np.ndarray  # (n_pos, 7) with the yaw residual folded
    dir: np.ndarray  # (n_pos,)

    @property
    def n_pos(self) -> int:
        return len(self.pos_index)


def build_targets(anchors: AnchorGrid, gts: Sequence[Box3D], cfg: NetworkConfig) -> Targets:
    match = match_anchors(anchors, gts, cfg)
    n = len(anchors)
    cls = np.zeros((n, cfg.num_classes))
    pos = np.nonzero(match.positive)[0]
    if len(pos):
        gt_arr = boxes_to_array(gts)
        cls[pos, anchors.class_index[pos]] = 1.0
        reg = encode(gt_arr[match.assignment[pos]], anchors.boxes[pos])
        reg[:, 6], direction = split_direction(reg[:, 6])
    else:
        reg = np.zeros((0, 7))
        direction = np.zeros(0, dtype=np.int64)
    weight = (~match.ignore).astype(np.float64)
    return Targets(cls, weight, pos, reg, direction)
