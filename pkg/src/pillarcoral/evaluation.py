"""KITTI-style detection metrics: rotated BEV/3D IoU, interpolated AP and AOS.

Matching is class-strict and greedy in descending score order. The
precision-recall curve is swept over distinct score thresholds across the
whole dataset before interpolation.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import Box3D, ClassId, Dataset, boxes_to_array
from .errors import ConfigError, FormatError, FrameMismatch, IoError
from .geometry import bev_iou, bev_iou_arrays, iou3d, iou3d_arrays

__all__ = [
    "Interpolation", "EvalConfig", "EvalReport", "MetricRow", "bev_iou", "iou3d",
    "average_precision", "aos", "evaluate", "match_detections",
]

SHORT_NAMES = {ClassId.Car: "car", ClassId.Pedestrian: "ped"}
_IOU_FUNCS = {"bev": bev_iou_arrays, "3d": iou3d_arrays}


class Interpolation(enum.Enum):
    Points41 = 41
    Points11 = 11


def _interp(value) -> Interpolation:
    if isinstance(value, Interpolation):
        return value
    if isinstance(value, str):
        value = value.lower().removeprefix("points")
    return Interpolation(int(value))


@dataclass(frozen=True)
class EvalConfig:
    thresholds: Mapping[str, Mapping[str, tuple[float, ...]]] = field(default_factory=lambda: {
        "Car": {"bev": (0.5, 0.7), "3d": (0.5, 0.7)},
        "Pedestrian": {"bev": (0.25, 0.5), "3d": (0.25, 0.5)},
    })
    aos_threshold: Mapping[str, float] = field(default_factory=lambda: {"Car": 0.5, "Pedestrian": 0.25})
    interpolation: Interpolation = Interpolation.Points41

    def __post_init__(self):
        object.__setattr__(self, "interpolation", _interp(self.interpolation))
        for cls, metrics in self.thresholds.items():
            if cls not in ClassId.__members__:
                raise ConfigError(f"unknown class {cls!r} in eval thresholds")
            for metric, values in metrics.items():
                if metric not in _IOU_FUNCS:
                    raise ConfigError(f"unknown metric {metric!r}; expected one of {sorted(_IOU_FUNCS)}")
                for v in values:
                    if not 0.0 < v <= 1.0:
                        raise ConfigError(f"IoU threshold {v} outside (0, 1]")
        for cls, v in self.aos_threshold.items():
            if cls not in ClassId.__members__ or not 0.0 < v <= 1.0:
                raise ConfigError(f"bad AOS threshold {cls}={v}")


@dataclass(frozen=True)
class MetricRow:
    value: float
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    rows: dict[str, MetricRow]

    def __getitem__(self, label: str) -> float:
        return self.rows[label].value

    def to_csv(self, path) -> None:
        try:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["metric", "value", "tp", "fp", "fn"])
                for label, r in self.rows.items():
                    w.writerow([label, f"{r.value:.4f}", r.tp, r.fp, r.fn])
        except OSError as exc:
            raise IoError(f"cannot write report {path}: {exc}") from exc

    @classmethod
    def from_csv(cls, path) -> EvalReport:
        try:
            with open(path, newline="") as fh:
                reader = csv.DictReader(fh)
                rows = {r["metric"]: MetricRow(float(r["value"]), int(r["tp"]), int(r["fp"]), int(r["fn"]))
                        for r in reader}
        except OSError as exc:
            raise IoError(f"cannot read report {path}: {exc}") from exc
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}: malformed report") from exc
        return cls(rows)

    def format_table(self, baseline: EvalReport | None = None) -> str:
        width = max((len(k) for k in self.rows), default=6)
        lines = []
        for label, r in self.rows.items():
            line = f"{label:<{width}}  {r.value:7.2f}"
            if baseline is not None and label in baseline.rows:
                line += f"  (baseline {baseline.rows[label].value:7.2f}, delta {r.value - baseline.rows[label].value:+7.2f})"
            lines.append(line)
        return "\n".join(lines)


# -- matching ----------------------------------------------------------------------

def _split_preds(preds) -> tuple[list[Box3D], np.ndarray]:
    boxes, scores = [], []
    for p in preds:
        if isinstance(p, Box3D):
            if p.score is None:
                raise FormatError("prediction without score")
            boxes.append(p)
            scores.append(p.score)
        else:
            box, score = p
            boxes.append(box)
            scores.append(float(score))
    return boxes, np.asarray(scores, dtype=np.float64)


def match_detections(preds, gts: Sequence[Box3D], class_id: ClassId, threshold: float,
                     metric: str = "bev") -> tuple[list[tuple[float, bool, float]], int]:
    """Greedy single-frame matching.

    Returns ``(records, n_gt)`` with one ``(score, is_tp, orientation_similarity)``
    per prediction of ``class_id``, in descending score order.
    """
    class_id = ClassId(class_id)
    boxes, scores = _split_preds(preds)
    keep = [i for i, b in enumerate(boxes) if b.class_id == class_id]
    gt = [g for g in gts if g.class_id == class_id]
    order = sorted(keep, key=lambda i: -scores[i])
    if not order:
        return [], len(gt)
    if gt:
        ious = _IOU_FUNCS[metric](boxes_to_array([boxes[i] for i in order]), boxes_to_array(gt))
    matched = np.zeros(len(gt), dtype=bool)
    records = []
    for row, i in enumerate(order):
        tp, sim = False, 0.0
        if gt:
            cand = np.where(matched, -1.0, ious[row])
            j = int(np.argmax(cand))
            if cand[j] >= threshold:
                matched[j] = True
                tp = True
                sim = (1.0 + math.cos(boxes[i].yaw - gt[j].yaw)) / 2.0
        records.append((float(scores[i]), tp, sim))
    return records, len(gt)


def _sweep(records: list[tuple[float, bool, float]], n_gt: int):
    """Precision, recall and orientation-weighted precision at each distinct score."""
    if not records:
        return np.zeros(0), np.zeros(0), np.zeros(0), 0, 0
    recs = sorted(records, key=lambda r: -r[0])
    scores = np.array([r[0] for r in recs])
    tp = np.cumsum([r[1] for r in recs])
    sim = np.cumsum([r[2] for r in recs])
    k = np.arange(1, len(recs) + 1)
    # one operating point per distinct threshold: the last detection of each tie group
    ends = np.r_[np.nonzero(scores[1:] != scores[:-1])[0], len(recs) - 1]
    precision = tp[ends] / k[ends]
    recall = tp[ends] / n_gt if n_gt else np.zeros(len(ends))
    orient = sim[ends] / k[ends]
    return precision, recall, orient, int(tp[-1]), int(len(recs) - tp[-1])


def _interpolated_mean(recall: np.ndarray, values: np.ndarray, interpolation: Interpolation) -> float:
    points = np.linspace(0.0, 1.0, interpolation.value)
    total = 0.0
    for r in points:
        sel = values[recall >= r - 1e-12]
        total += sel.max() if sel.size else 0.0
    return 100.0 * total / len(points)


def _collect(pred_frames, gt_frames, class_id, threshold, metric):
    records, n_gt = [], 0
    for preds, gts in zip(pred_frames, gt_frames):
        r, n = match_detections(preds, gts, class_id, threshold, metric)
        records.extend(r)
        n_gt += n
    return records, n_gt


def average_precision(preds, gts, class_id=ClassId.Car, threshold: float = 0.5,
                      interpolation=Interpolation.Points41, metric: str = "bev") -> float:
    """Interpolated AP in percent for a single frame of predictions and ground truth."""
    records, n_gt = _collect([preds], [gts], class_id, threshold, metric)
    precision, recall, _, _, _ = _sweep(records, n_gt)
    if n_gt == 0:
        return 0.0
    return _interpolated_mean(recall, precision, _interp(interpolation))


def aos(preds, gts, class_id=ClassId.Car, threshold: float = 0.5,
        interpolation=Interpolation.Points41, metric: str = "bev") -> float:
    """Average orientation similarity in percent; never exceeds the matching AP."""
    records, n_gt = _collect([preds], [gts], class_id, threshold, metric)
    _, recall, orient, _, _ = _sweep(records, n_gt)
    if n_gt == 0:
        return 0.0
    return _interpolated_mean(recall, orient, _interp(interpolation))


def dataset_metric(pred_frames, gt_frames, class_id, threshold, interpolation, metric="bev"):
    """Dataset-level AP and AOS with matches pooled over frames before the sweep."""
    records, n_gt = _collect(pred_frames, gt_frames, class_id, threshold, metric)
    precision, recall, orient, tp, fp = _sweep(records, n_gt)
    interpolation = _interp(interpolation)
    if n_gt == 0:
        return 0.0, 0.0, tp, fp, 0
    return (_interpolated_mean(recall, precision, interpolation),
            _interpolated_mean(recall, orient, interpolation), tp, fp, n_gt - tp)


def evaluate(preds_by_frame: Mapping[str, Iterable[Box3D]], ds: Dataset, cfg: EvalConfig | None = None) -> EvalReport:
    cfg = cfg or EvalConfig()
    frames = ds.by_id()
    if set(preds_by_frame) != set(frames):
        missing = sorted(set(frames) - set(preds_by_frame))[:3]
        extra = sorted(set(preds_by_frame) - set(frames))[:3]
        raise FrameMismatch(f"prediction frames do not match dataset (missing {missing}, unknown {extra})")
    ids = [f.frame_id for f in ds.frames]
    pred_frames = [list(preds_by_frame[i]) for i in ids]
    gt_frames = [list(frames[i].boxes) for i in ids]
    rows: dict[str, MetricRow] = {}
    for cls_name, metrics in cfg.thresholds.items():
        cid = ClassId[cls_name]
        short = SHORT_NAMES.get(cid, cls_name.lower())
        for metric, thresholds in metrics.items():
            for thr in thresholds:
                ap, _, tp, fp, fn = dataset_metric(pred_frames, gt_frames, cid, thr, cfg.interpolation, metric)
                rows[f"{short}_{metric}@{thr:.2f}"] = MetricRow(ap, tp, fp, fn)
        if cls_name in cfg.aos_threshold:
            thr = cfg.aos_threshold[cls_name]
            _, orient, tp, fp, fn = dataset_metric(pred_frames, gt_frames, cid, thr, cfg.interpolation, "bev")
            rows[f"{short}_aos"] = MetricRow(orient, tp, fp, fn)
    return EvalReport(rows)

