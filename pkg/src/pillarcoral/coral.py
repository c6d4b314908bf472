"""Correlation alignment (CORAL) between source and target feature batches.

The loss is the squared Frobenius distance between the two feature covariance
matrices, scaled by ``1 / (4 d^2)``. Covariances use the unbiased ``1/(n-1)``
normalization and the analytic gradient is paired with it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import Domain
from .errors import DimensionMismatch, FormatError, TooFewSamples


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray  # (n, d): rows are samples
    domain_tag: Domain | None = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionMismatch(f"feature matrix must be 2-D, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FormatError("feature matrix has non-finite entries")
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


def _matrix(f) -> np.ndarray:
    return f.data if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64)


def reshape_feature_map(fm, domain_tag: Domain | None = None) -> FeatureMatrix:
    """(bn, K, H', W') -> (K*bn, H'*W'): one row per (batch, channel) slice, batch-major."""
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 4:
        raise DimensionMismatch(f"feature map must be 4-D, got {fm.shape}")
    bn, k, h, w = fm.shape
    return FeatureMatrix(fm.reshape(bn * k, h * w), domain_tag)


def unreshape_feature_matrix(f, shape) -> np.ndarray:
    return _matrix(f).reshape(shape)


def covariance(f) -> np.ndarray:
    """Unbiased sample covariance (d, d) of the rows of an (n, d) matrix."""
    x = _matrix(f)
    n = x.shape[0]
    if n < 2:
        raise TooFewSamples(f"covariance needs at least 2 samples, got {n}")
    xc = x - x.mean(axis=0, keepdims=True)
    c = xc.T @ xc / (n - 1)
    return 0.5 * (c + c.T)


def _check_pair(fs: np.ndarray, ft: np.ndarray):
    if fs.ndim != 2 or ft.ndim != 2 or fs.shape[1] != ft.shape[1]:
        raise DimensionMismatch(f"source {fs.shape} and target {ft.shape} feature widths differ")


def coral_loss(f_s, f_t) -> float:
    fs, ft = _matrix(f_s), _matrix(f_t)
    _check_pair(fs, ft)
    d = fs.shape[1]
    diff = covariance(fs) - covariance(ft)
    return float(np.sum(diff * diff) / (4.0 * d * d))


def coral_backward(f_s, f_t) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of :func:`coral_loss` with respect to both inputs."""
    fs, ft = _matrix(f_s), _matrix(f_t)
    _check_pair(fs, ft)
    d = fs.shape[1]
    diff = covariance(fs) - covariance(ft)
    ns, nt = fs.shape[0], ft.shape[0]
    gs = (fs - fs.mean(axis=0, keepdims=True)) @ diff / (d * d * (ns - 1))
    gt = -(ft - ft.mean(axis=0, keepdims=True)) @ diff / (d * d * (nt - 1))
    return gs, gt


def coral_loss_op(f_s: ad.Tensor, f_t: ad.Tensor) -> ad.Tensor:
    """CORAL loss as a recorded autodiff op backed by :func:`coral_backward`."""
    value = coral_loss(f_s.data, f_t.data)

    def backward(g):
        gs, gt = coral_backward(f_s.data, f_t.data)
        return g * gs, g * gt

    return ad.custom_op(np.array(value), (f_s, f_t), backward)


def feature_map_matrix(fm: ad.Tensor) -> ad.Tensor:
    """Autodiff twin of :func:`reshape_feature_map`."""
    bn, k, h, w = fm.shape
    return ad.reshape(fm, (bn * k, h * w))
