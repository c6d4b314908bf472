"""Miniature pillar-based 3-D detector."""
from .anchors import AnchorGrid, MatchResult, Targets, build_targets, decode, encode, match_anchors, split_direction
from .network import (
    CLASS_ORDER, NetOutput, NetworkConfig, PillarBatch, PillarNet, backbone_forward, head_forward, pfn_forward,
)
from .training import (
    CoralConfig, LossWeights, TrainConfig, TrainResult, detection_loss, infer, infer_dataset, load_model,
    save_model, total_loss, train, write_loss_log,
)

__all__ = [
    "AnchorGrid", "MatchResult", "Targets", "build_targets", "decode", "encode", "match_anchors", "split_direction",
    "CLASS_ORDER", "NetOutput", "NetworkConfig", "PillarBatch", "PillarNet", "backbone_forward", "head_forward",
    "pfn_forward", "CoralConfig", "LossWeights", "TrainConfig", "TrainResult", "detection_loss", "infer",
    "infer_dataset", "load_model", "save_model", "total_loss", "train", "write_loss_log",
]
