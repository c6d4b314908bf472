"""Detection losses, the joint supervised + CORAL objective, training and inference."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..checkpoint import load_checkpoint, save_checkpoint
from ..coral import coral_loss_op, feature_map_matrix
from ..core import Box3D, Dataset, Frame, clip_to_range
from ..errors import CheckpointMismatch, ConfigError, EmptyDataset, IoError, NumericalDivergence
from ..geometry import nms
from ..pillar import PillarGridConfig, PillarTensor, pillarize
from ..scenegen import derive_seed
from .anchors import AnchorGrid, Targets, build_targets, decode
from .network import CLASS_ORDER, NetOutput, NetworkConfig, PillarBatch, PillarNet

LOG_HEADER = ("step", "l_cls", "l_loc", "l_dir", "l_da", "l_total")
CORAL_HOOKS = ("backbone", "pseudo_image")


@dataclass(frozen=True)
class CoralConfig:
    beta_da: float = 0.0
    hook: str = "backbone"

    def __post_init__(self):
        if not (math.isfinite(self.beta_da) and self.beta_da >= 0):
            raise ConfigError(f"beta_da must be finite and >= 0, got {self.beta_da}")
        if self.hook not in CORAL_HOOKS:
            raise ConfigError(f"coral hook must be one of {CORAL_HOOKS}, got {self.hook!r}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    # "constant" or "cosine" (decays to zero over the whole run)
    lr_schedule: str = "constant"
    min_gt_points: int = 0
    # a total loss this many times above the first step's counts as divergence
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError("lr must be finite and > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.min_gt_points < 0:
            raise ConfigError("min_gt_points must be >= 0")
        if not self.divergence_factor > 1:
            raise ConfigError("divergence_factor must be > 1")

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.lr_schedule == "constant" or total_steps <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    loc: float = 2.0
    dir: float = 0.2
    da: float = 0.0

    @classmethod
    def from_configs(cls, net: NetworkConfig, coral: CoralConfig | None = None) -> LossWeights:
        return cls(net.beta_cls, net.beta_loc, net.beta_dir, coral.beta_da if coral else 0.0)


# -- losses ----------------------------------------------------------------------

def detection_loss(out: NetOutput, targets: Sequence[Targets], cfg: NetworkConfig):
    """Summed ``(L_cls, L_loc, L_dir)`` over a batch plus its positive-anchor count."""
    bn, n_anchor, _ = out.cls.shape
    if len(targets) != bn:
        raise ValueError(f"{len(targets)} target sets for a batch of {bn}")
    cls_t = np.stack([t.cls for t in targets])
    cls_w = np.stack([t.cls_weight for t in targets])[..., None]
    l_cls = ad.sigmoid_focal_loss(out.cls, cls_t, cls_w, cfg.focal_alpha, cfg.focal_gamma)
    pos = np.concatenate([t.pos_index + b * n_anchor for b, t in enumerate(targets)]).astype(np.int64)
    n_pos = len(pos)
    if n_pos == 0:
        zero = ad.mul(ad.sum(out.reg), 0.0) + ad.mul(ad.sum(out.dir), 0.0)
        return l_cls, zero, zero, 0
    reg_t = np.concatenate([t.reg for t in targets])
    dir_t = np.concatenate([t.dir for t in targets])
    reg = ad.take(ad.reshape(out.reg, (bn * n_anchor, 7)), pos, axis=0)
    l_loc = ad.smooth_l1(ad.sub(reg, reg_t), beta=1.0)
    dlog = ad.take(ad.reshape(out.dir, (bn * n_anchor, 2)), pos, axis=0)
    l_dir = ad.softmax_cross_entropy(dlog, dir_t)
    return l_cls, l_loc, l_dir, n_pos


def total_loss(l_cls, l_loc, l_dir, l_da, weights: LossWeights, n_pos: int):
    """``(b_cls L_cls + b_loc L_loc + b_dir L_dir) / max(N_pos, 1) + b_DA L_DA``.

    Works on plain floats or on tensors recorded on the active tape.
    """
    for b in (weights.cls, weights.loc, weights.dir, weights.da):
        if not (math.isfinite(b) and b >= 0):
            raise ConfigError("loss weights must be finite and non-negative")
    norm = 1.0 / max(int(n_pos), 1)
    sup = weights.cls * l_cls + weights.loc * l_loc + weights.dir * l_dir
    return sup * norm + weights.da * l_da


# -- data preparation ------------------------------------------------------------

@dataclass
class PreparedFrames:
    pillars: list[PillarTensor]
    targets: list[Targets] | None


def prepare_frames(ds: Dataset, grid: PillarGridConfig, seed: int, anchors: AnchorGrid | None = None,
                   net_cfg: NetworkConfig | None = None) -> PreparedFrames:
    pillars, targets = [], []
    for i, frame in enumerate(ds.frames):
        cloud = clip_to_range(frame.cloud, grid.range)
        pillars.append(pillarize(cloud, grid, derive_seed(seed, i, 11)))
        if anchors is not None:
            targets.append(build_targets(anchors, frame.boxes, net_cfg))
    return PreparedFrames(pillars, targets if anchors is not None else None)


# -- training --------------------------------------------------------------------

@dataclass
class TrainResult:
    model: PillarNet
    log: list[tuple[int, float, float, float, float, float]] = field(default_factory=list)

    def write_log(self, path) -> None:
        write_loss_log(self.log, path)


def write_loss_log(rows, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for step, *vals in rows:
                w.writerow([step, *(repr(float(v)) for v in vals)])
    except OSError as exc:
        raise IoError(f"cannot write loss log {path}: {exc}") from exc


def _check_finite(step: int, values, params, limit: float = math.inf) -> None:
    if not all(math.isfinite(v) for v in values):
        raise NumericalDivergence(f"non-finite loss at step {step}")
    if values[-1] > limit:
        raise NumericalDivergence(f"loss {values[-1]:.3g} at step {step} exploded past {limit:.3g}")
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise NumericalDivergence(f"non-finite parameter {p.name} after step {step}")


def train(sim: Dataset, real: Dataset | None, grid: PillarGridConfig, net_cfg: NetworkConfig,
          coral_cfg: CoralConfig | None = None, train_cfg: TrainConfig | None = None,
          progress=None) -> TrainResult:
    """Joint training: detection losses on simulated batches, CORAL between domains.

    Each step runs one simulated and one real batch through the network
    together (batch statistics are shared), splits the feature map by domain,
    and applies one optimizer update. With ``beta_da == 0`` the CORAL term is
    neither computed nor backpropagated.
    """
    coral_cfg = coral_cfg or CoralConfig()
    train_cfg = train_cfg or TrainConfig()
    if len(sim) == 0:
        raise EmptyDataset("simulated training set is empty")
    use_real = real is not None and len(real) > 0
    if coral_cfg.beta_da > 0 and not use_real:
        raise EmptyDataset("beta_da > 0 needs a non-empty real dataset")

    seed = train_cfg.seed
    model = PillarNet(net_cfg, grid, seed=derive_seed(seed, 99))
    anchors = AnchorGrid.build(grid, net_cfg)
    sim_data = prepare_frames(sim, grid, derive_seed(seed, 1), anchors, net_cfg)
    real_data = prepare_frames(real, grid, derive_seed(seed, 2)) if use_real else None
    weights = LossWeights.from_configs(net_cfg, coral_cfg)
    params = model.parameters
    adam = ad.AdamState.for_params(params)

    bn = min(train_cfg.batch_size, len(sim))
    steps_per_epoch = math.ceil(len(sim) / bn)
    total_steps = steps_per_epoch * train_cfg.epochs
    log = []
    step = 0
    real_cursor = 0
    real_order = np.arange(len(real)) if use_real else None
    limit = math.inf
    for epoch in range(train_cfg.epochs):
        rng = np.random.default_rng(derive_seed(seed, epoch, 7))
        order = rng.permutation(len(sim))
        if use_real:
            real_order = rng.permutation(len(real))
            real_cursor = 0
        for s in range(steps_per_epoch):
            idx = order[s * bn:(s + 1) * bn]
            tensors = [sim_data.pillars[i] for i in idx]
            n_sim = len(tensors)
            if use_real:
                ridx = [real_order[(real_cursor + k) % len(real)] for k in range(n_sim)]
                real_cursor += n_sim
                tensors += [real_data.pillars[i] for i in ridx]
            batch = PillarBatch.collate(tensors, grid)
            with ad.Tape() as tape:
                tape.watch(*params)
                img = model.pfn(batch, train=True)
                fm = model.backbone(img, train=True)
                sim_rows = np.arange(n_sim)
                out = model.head(ad.take(fm, sim_rows, axis=0) if use_real else fm)
                l_cls, l_loc, l_dir, n_pos = detection_loss(out, [sim_data.targets[i] for i in idx], net_cfg)
                l_da = ad.Tensor(0.0)
                if coral_cfg.beta_da > 0:
                    hooked = fm if coral_cfg.hook == "backbone" else img
                    f_s = feature_map_matrix(ad.take(hooked, sim_rows, axis=0))
                    f_t = feature_map_matrix(ad.take(hooked, np.arange(n_sim, 2 * n_sim), axis=0))
                    l_da = coral_loss_op(f_s, f_t)
                loss = total_loss(l_cls, l_loc, l_dir, l_da, weights, n_pos)
                values = (l_cls.item(), l_loc.item(), l_dir.item(), l_da.item(), loss.item())
                _check_finite(step, values, (), limit)
                if step == 0:
                    limit = train_cfg.divergence_factor * max(values[-1], 1.0)
                grads = tape.gradient(loss, params)
            lr = train_cfg.lr_at(step, total_steps)
            if train_cfg.optimizer == "adam":
                ad.adam_step(params, grads, adam, lr=lr)
            else:
                ad.sgd_step(params, grads, lr)
            _check_finite(step, values, params)
            log.append((step, *values))
            if progress is not None:
                progress(step, epoch, values)
            step += 1
    return TrainResult(model, log)


# -- inference -------------------------------------------------------------------

def predict_batch(model: PillarNet, pillars: Sequence[PillarTensor], anchors: AnchorGrid,
                  score_threshold: float, nms_iou: float) -> list[list[Box3D]]:
    out = model.forward(PillarBatch.collate(list(pillars), model.grid), train=False)
    cls = out.cls.data
    reg = out.reg.data
    direc = out.dir.data
    results = []
    idx = np.arange(len(anchors))
    for b in range(cls.shape[0]):
        logit = cls[b, idx, anchors.class_index]
        score = 0.5 * (1.0 + np.tanh(0.5 * logit))
        keep = np.nonzero(score > score_threshold)[0]
        frame_boxes: list[tuple[float, Box3D]] = []
        if len(keep):
            deltas = reg[b, keep].copy()
            flip = direc[b, keep, 1] > direc[b, keep, 0]
            deltas[:, 6] += np.where(flip, math.pi, 0.0)
            decoded = decode(deltas, anchors.boxes[keep])
            for k in range(len(CLASS_ORDER)):
                sel = np.nonzero(anchors.class_index[keep] == k)[0]
                if len(sel) == 0:
                    continue
                kept = nms(decoded[sel], score[keep][sel], nms_iou)
                for j in kept:
                    row = decoded[sel[j]]
                    s = float(np.clip(score[keep][sel[j]], 0.0, 1.0))
                    frame_boxes.append((s, Box3D(tuple(row[:3]), tuple(row[3:6]), float(row[6]),
                                                 CLASS_ORDER[k], s)))
        frame_boxes.sort(key=lambda t: -t[0])
        results.append([bx for _, bx in frame_boxes])
    return results


def infer(frame: Frame, model: PillarNet | str | Path, score_threshold: float = 0.3, nms_iou: float = 0.5,
          net_cfg: NetworkConfig | None = None, grid: PillarGridConfig | None = None) -> list[Box3D]:
    if not isinstance(model, PillarNet):
        model = load_model(model, net_cfg, grid)
    cloud = clip_to_range(frame.cloud, model.grid.range)
    if len(cloud) == 0:
        return []
    anchors = AnchorGrid.build(model.grid, model.cfg)
    pt = pillarize(cloud, model.grid, 0)
    return predict_batch(model, [pt], anchors, score_threshold, nms_iou)[0]


def infer_dataset(ds: Dataset, model: PillarNet, score_threshold: float = 0.3, nms_iou: float = 0.5,
                  batch_size: int = 8) -> dict[str, list[Box3D]]:
    anchors = AnchorGrid.build(model.grid, model.cfg)
    out: dict[str, list[Box3D]] = {}
    frames = list(ds.frames)
    for start in range(0, len(frames), batch_size):
        chunk = frames[start:start + batch_size]
        pts = [pillarize(clip_to_range(f.cloud, model.grid.range), model.grid, 0) for f in chunk]
        preds = predict_batch(model, pts, anchors, score_threshold, nms_iou)
        for f, p, t in zip(chunk, preds, pts):
            out[f.frame_id] = p if t.num_pillars else []
    return out


# -- checkpoints -----------------------------------------------------------------

def grid_to_dict(grid: PillarGridConfig) -> dict:
    return {"range": asdict(grid.range), "pillar_size": list(grid.pillar_size),
            "max_points_per_pillar": grid.max_points_per_pillar, "max_pillars": grid.max_pillars,
            "point_feature_dim": grid.point_feature_dim}


def save_model(model: PillarNet, path, extra: dict | None = None) -> None:
    meta = {"network": model.cfg.to_dict(), "grid": grid_to_dict(model.grid)}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path, net_cfg: NetworkConfig | None = None, grid: PillarGridConfig | None = None) -> PillarNet:
    """Rebuild a network from a checkpoint; configs given explicitly must match the stored ones."""
    from ..config import grid_from_dict, network_from_dict

    arrays, meta = load_checkpoint(path)
    try:
        stored_net = network_from_dict(meta["network"])
        stored_grid = grid_from_dict(meta["grid"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointMismatch(f"{path}: missing or invalid configuration metadata") from exc
    if net_cfg is not None and net_cfg.to_dict() != stored_net.to_dict():
        raise CheckpointMismatch(f"{path}: network configuration differs from the checkpoint")
    if grid is not None and grid_to_dict(grid) != grid_to_dict(stored_grid):
        raise CheckpointMismatch(f"{path}: pillar grid differs from the checkpoint")
    model = PillarNet(stored_net, stored_grid)
    model.load_state_dict(arrays)
    return model
