"""Miniature PointPillars network: pillar feature net, 2-D backbone, SSD-style head."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .. import autodiff as ad
from ..core import ClassId
from ..errors import CheckpointMismatch, ConfigError, ShapeMismatch
from ..pillar import PillarGridConfig, PillarTensor, PseudoImage

CLASS_ORDER = (ClassId.Car, ClassId.Pedestrian)


@dataclass(frozen=True)
class NetworkConfig:
    channels: int = 16
    layers_per_block: tuple[int, int, int] = (1, 1, 1)
    block_multipliers: tuple[int, int, int] = (1, 1, 2)
    anchor_sizes: Mapping[str, tuple[float, float, float]] = field(default_factory=lambda: {
        "Car": (4.5, 1.8, 1.5), "Pedestrian": (0.6, 0.6, 1.7)})
    anchor_z: Mapping[str, float] = field(default_factory=lambda: {"Car": -1.05, "Pedestrian": -0.95})
    anchor_yaws: tuple[float, ...] = (0.0, math.pi / 2)
    match_iou_pos: Mapping[str, float] = field(default_factory=lambda: {"Car": 0.6, "Pedestrian": 0.5})
    match_iou_neg: Mapping[str, float] = field(default_factory=lambda: {"Car": 0.45, "Pedestrian": 0.35})
    beta_cls: float = 1.0
    beta_loc: float = 2.0
    beta_dir: float = 0.2
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    bn_eps: float = 1e-3
    bn_momentum: float = 0.9
    cls_prior: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "layers_per_block", tuple(int(v) for v in self.layers_per_block))
        object.__setattr__(self, "block_multipliers", tuple(int(v) for v in self.block_multipliers))
        object.__setattr__(self, "anchor_yaws", tuple(float(v) for v in self.anchor_yaws))
        object.__setattr__(self, "anchor_sizes", {k: tuple(float(x) for x in v) for k, v in self.anchor_sizes.items()})
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if len(self.layers_per_block) != 3 or len(self.block_multipliers) != 3:
            raise ConfigError("the backbone has exactly three blocks")
        if sum(self.block_multipliers) != 4 or min(self.block_multipliers) < 1:
            raise ConfigError("block channel multipliers must be positive and sum to 4")
        for name in self.class_names:
            for table in (self.anchor_sizes, self.anchor_z, self.match_iou_pos, self.match_iou_neg):
                if name not in table:
                    raise ConfigError(f"missing per-class setting for {name}")
            if not self.match_iou_neg[name] < self.match_iou_pos[name]:
                raise ConfigError(f"{name}: match_iou_neg must be < match_iou_pos")
            if min(self.anchor_sizes[name]) <= 0:
                raise ConfigError(f"{name}: anchor size must be positive")
        for b in (self.beta_cls, self.beta_loc, self.beta_dir):
            if not (math.isfinite(b) and b >= 0):
                raise ConfigError("loss weights must be finite and non-negative")

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in CLASS_ORDER)

    @property
    def num_classes(self) -> int:
        return len(CLASS_ORDER)

    @property
    def anchors_per_cell(self) -> int:
        return self.num_classes * len(self.anchor_yaws)

    @property
    def feature_channels(self) -> int:
        return 4 * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchor_sizes"] = {k: list(v) for k, v in self.anchor_sizes.items()}
        d["layers_per_block"] = list(self.layers_per_block)
        d["block_multipliers"] = list(self.block_multipliers)
        d["anchor_yaws"] = list(self.anchor_yaws)
        return d


@dataclass(frozen=True)
class PillarBatch:
    """Pillars of several frames flattened for a single network pass."""
    points: np.ndarray  # (M, D) decorated rows of valid points
    pillar_start: np.ndarray  # (n_pillars,) first row of each pillar in ``points``
    pillar_cell: np.ndarray  # (n_pillars,) index into batch * H * W
    n_pillars: int
    max_points: int
    batch: int
    grid_shape: tuple[int, int]

    @classmethod
    def collate(cls, tensors: Sequence[PillarTensor], grid: PillarGridConfig) -> PillarBatch:
        h, w = grid.grid_shape
        n = grid.max_points_per_pillar
        d = grid.point_feature_dim
        pts, counts, cells = [np.zeros((0, d))], [np.zeros(0, np.int64)], [np.zeros(0, np.int64)]
        for b, pt in enumerate(tensors):
            p_idx, n_idx = np.nonzero(pt.point_mask)
            pts.append(pt.features[:, p_idx, n_idx].T)
            counts.append(np.asarray(pt.pillar_counts, dtype=np.int64))
            cells.append(b * h * w + pt.pillar_coords[:, 0] * w + pt.pillar_coords[:, 1])
        counts = np.concatenate(counts)
        starts = np.r_[0, np.cumsum(counts)[:-1]].astype(np.int64) if len(counts) else counts
        return cls(np.concatenate(pts), starts, np.concatenate(cells).astype(np.int64),
                   len(counts), n, len(tensors), (h, w))


@dataclass
class NetOutput:
    features: ad.Tensor  # (bn, 4C, H/8, W/8)
    cls: ad.Tensor | None = None  # (bn, anchors, classes)
    reg: ad.Tensor | None = None  # (bn, anchors, 7)
    dir: ad.Tensor | None = None  # (bn, anchors, 2)


class PillarNet:
    """Parameters and forward passes of the detector."""

    def __init__(self, cfg: NetworkConfig, grid: PillarGridConfig, seed: int = 0):
        h, w = grid.grid_shape
        if h % 8 or w % 8:
            raise ConfigError(f"grid {h}x{w} must be divisible by 8")
        self.cfg = cfg
        self.grid = grid
        self.params: OrderedDict[str, ad.Tensor] = OrderedDict()
        self.bn: dict[str, ad.BatchNormState] = {}
        rng = np.random.default_rng(seed)
        c = cfg.channels
        d = grid.point_feature_dim

        self._add("pfn.linear.weight", rng.normal(0.0, math.sqrt(2.0 / d), (c, d)))
        self._add("pfn.linear.bias", np.zeros(c))
        self._add_bn("pfn.bn", c)

        cin = c
        for bi, (layers, mult) in enumerate(zip(cfg.layers_per_block, cfg.block_multipliers)):
            cout = mult * c
            for li in range(1 + layers):
                name = f"backbone.block{bi}.conv{li}"
                fan_in = cin * 9
                self._add(f"{name}.weight", rng.normal(0.0, math.sqrt(2.0 / fan_in), (cout, cin, 3, 3)))
                self._add_bn(f"{name}.bn", cout)
                cin = cout

        a = cfg.anchors_per_cell
        fc = cfg.feature_channels
        std = 0.01
        self._add("head.cls.weight", rng.normal(0.0, std, (a * cfg.num_classes, fc, 1, 1)))
        self._add("head.cls.bias", np.full(a * cfg.num_classes, -math.log((1 - cfg.cls_prior) / cfg.cls_prior)))
        self._add("head.reg.weight", rng.normal(0.0, std, (a * 7, fc, 1, 1)))
        self._add("head.reg.bias", np.zeros(a * 7))
        self._add("head.dir.weight", rng.normal(0.0, std, (a * 2, fc, 1, 1)))
        self._add("head.dir.bias", np.zeros(a * 2))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = ad.Tensor(value, requires_grad=True, name=name)

    def _add_bn(self, name: str, channels: int) -> None:
        self._add(f"{name}.gamma", np.ones(channels))
        self._add(f"{name}.beta", np.zeros(channels))
        self.bn[name] = ad.BatchNormState(channels, momentum=self.cfg.bn_momentum)

    def _batchnorm(self, x: ad.Tensor, name: str, train: bool) -> ad.Tensor:
        return ad.batchnorm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                            self.bn[name], train=train, eps=self.cfg.bn_eps)

    @property
    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    # -- forward passes ---------------------------------------------------------------

    def pfn(self, batch: PillarBatch, train: bool = False) -> ad.Tensor:
        """Pseudo-image (bn, C, H, W) from a collated pillar batch."""
        c = self.cfg.channels
        h, w = batch.grid_shape
        if batch.points.shape[1] != self.params["pfn.linear.weight"].shape[1]:
            raise ShapeMismatch(f"point features {batch.points.shape[1]} vs network input "
                                f"{self.params['pfn.linear.weight'].shape[1]}")
        if batch.points.shape[0] < 2:
            # too few points for batch statistics: nothing to encode
            return ad.Tensor(np.zeros((batch.batch, c, h, w)))
        x = ad.Tensor(batch.points)
        y = ad.linear(x, self.params["pfn.linear.weight"], self.params["pfn.linear.bias"])
        y = ad.relu(self._batchnorm(y, "pfn.bn", train))
        # points arrive grouped by pillar; padded slots never enter the max
        pooled = ad.segment_max(y, batch.pillar_start)
        img = ad.scatter_rows(pooled, batch.pillar_cell, batch.batch * h * w)
        return ad.transpose(ad.reshape(img, (batch.batch, h, w, c)), (0, 3, 1, 2))

    def backbone(self, img: ad.Tensor, train: bool = False) -> ad.Tensor:
        """(bn, C, H, W) -> (bn, 4C, H/8, W/8)."""
        if img.ndim != 4 or img.shape[1] != self.cfg.channels:
            raise ShapeMismatch(f"backbone expects (bn, {self.cfg.channels}, H, W), got {img.shape}")
        if img.shape[2] % 8 or img.shape[3] % 8:
            raise ShapeMismatch(f"spatial shape {img.shape[2:]} not divisible by 8")
        x = img
        outputs = []
        for bi, layers in enumerate(self.cfg.layers_per_block):
            for li in range(1 + layers):
                name = f"backbone.block{bi}.conv{li}"
                x = ad.conv2d(x, self.params[f"{name}.weight"], stride=2 if li == 0 else 1, padding=1)
                x = ad.relu(self._batchnorm(x, f"{name}.bn", train))
            outputs.append(x)
        # every block is average-pooled onto the H/8 grid of the last one
        b1 = ad.avgpool2x(ad.avgpool2x(outputs[0]))
        return ad.concat([b1, ad.avgpool2x(outputs[1]), outputs[2]], axis=1)

    def head(self, fm: ad.Tensor) -> NetOutput:
        bn, _, h, w = fm.shape
        a = self.cfg.anchors_per_cell

        def per_anchor(name: str, k: int) -> ad.Tensor:
            y = ad.conv2d(fm, self.params[f"head.{name}.weight"], self.params[f"head.{name}.bias"])
            y = ad.reshape(y, (bn, a, k, h, w))
            y = ad.transpose(y, (0, 3, 4, 1, 2))
            return ad.reshape(y, (bn, h * w * a, k))

        return NetOutput(fm, per_anchor("cls", self.cfg.num_classes), per_anchor("reg", 7), per_anchor("dir", 2))

    def forward(self, batch: PillarBatch, train: bool = False, head: bool = True) -> NetOutput:
        fm = self.backbone(self.pfn(batch, train), train)
        return self.head(fm) if head else NetOutput(fm)

    # -- persistence ----------------------------------------------------------------------

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        out: OrderedDict[str, np.ndarray] = OrderedDict((k, v.data) for k, v in self.params.items())
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        expected = self.state_dict()
        if list(arrays) != list(expected):
            missing = sorted(set(expected) - set(arrays))[:3]
            extra = sorted(set(arrays) - set(expected))[:3]
            raise CheckpointMismatch(f"parameter names differ (missing {missing}, unexpected {extra})")
        for name, arr in arrays.items():
            if np.shape(arr) != expected[name].shape:
                raise CheckpointMismatch(f"{name}: shape {np.shape(arr)} vs expected {expected[name].shape}")
        for name, t in self.params.items():
            t.data = np.array(arrays[name], dtype=np.float64)
        for name, st in self.bn.items():
            st.running_mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float64)
            st.running_var = np.array(arrays[f"{name}.running_var"], dtype=np.float64)


def pfn_forward(pillars: PillarTensor, net: PillarNet, train: bool = False) -> PseudoImage:
    """Single-frame pseudo-image (C, H, W)."""
    if pillars.features.shape[0] != net.grid.point_feature_dim:
        raise ShapeMismatch(f"pillar feature dim {pillars.features.shape[0]} vs {net.grid.point_feature_dim}")
    img = net.pfn(PillarBatch.collate([pillars], net.grid), train)
    return PseudoImage(img.data[0])


def backbone_forward(img, net: PillarNet, train: bool = False) -> ad.Tensor:
    x = img if isinstance(img, ad.Tensor) else ad.Tensor(np.asarray(getattr(img, "data", img)))
    if x.ndim == 3:
        x = ad.reshape(x, (1, *x.shape))
    return net.backbone(x, train)


def head_forward(fm, net: PillarNet) -> NetOutput:
    x = fm if isinstance(fm, ad.Tensor) else ad.Tensor(np.asarray(fm))
    if x.ndim != 4 or x.shape[1] != net.cfg.feature_channels:
        raise ShapeMismatch(f"head expects (bn, {net.cfg.feature_channels}, h, w), got {x.shape}")
    return net.head(x)
