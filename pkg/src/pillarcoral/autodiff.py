"""A small reverse-mode automatic differentiation engine over float64 numpy arrays.

Operations on tensors that require gradients are recorded on the innermost
active :class:`Tape`. ``tape.backward(loss)`` walks the records in reverse and
returns the gradient of ``loss`` with respect to every leaf seen on the tape::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad.square(w))
    grads = tape.backward(loss)
    grads[w.node_id].data  # -> [2., 2., 2.]

Outside a tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DetachedTensor, NotScalar, ShapeMismatch

_ids = itertools.count()
_active: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
        t.requires_grad = False
        t.node_id = next(_ids)
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_over_axis(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations; usable as a context manager."""

    def __init__(self):
        self._records: list[tuple[int, tuple[Tensor, ...], Callable]] = []
        self._outputs: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> Tape:
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def __len__(self) -> int:
        return len(self._records)

    @property
    def leaves(self) -> dict[int, Tensor]:
        return dict(self._leaves)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            t.requires_grad = True
            if t.node_id not in self._outputs:
                self._leaves.setdefault(t.node_id, t)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        for p in parents:
            if p.requires_grad and p.node_id not in self._outputs:
                self._leaves.setdefault(p.node_id, p)
        self._records.append((out.node_id, parents, backward))
        self._outputs.add(out.node_id)

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradients of a scalar ``loss`` for every leaf, keyed by ``node_id``."""
        if loss.data.size != 1:
            raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
        if loss.node_id not in self._outputs:
            raise DetachedTensor("loss was not produced by an operation on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for out_id, parents, fn in reversed(self._records):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for p, gp in zip(parents, fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                prev = grads.get(p.node_id)
                grads[p.node_id] = gp if prev is None else prev + gp
        return {
            lid: Tensor._wrap(np.asarray(grads[lid], dtype=np.float64).reshape(leaf.shape)
                              if lid in grads else np.zeros_like(leaf.data))
            for lid, leaf in self._leaves.items()
        }

    def gradient(self, loss: Tensor, tensors: Sequence[Tensor]) -> list[np.ndarray]:
        grads = self.backward(loss)
        return [grads[t.node_id].data if t.node_id in grads else np.zeros_like(t.data) for t in tensors]


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op output; ``backward(g)`` returns one gradient per parent."""
    out = Tensor._wrap(np.asarray(data, dtype=np.float64))
    if _active:
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            _active[-1].record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shapes(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mul")
    return custom_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "div")
    out = a.data / b.data
    return custom_op(out, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return custom_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    return custom_op(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def log(x: Tensor) -> Tensor:
    return custom_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return custom_op(out, (x,), lambda g: (g * out,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return custom_op(out, (x,), lambda g: (g * out * (1.0 - out),))


# -- reductions ----------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return custom_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,),
                     lambda g: (np.array(_expand(g, x.shape, axis, keepdims)),))


def mean_over_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return custom_op(np.mean(x.data, axis=axis, keepdims=keepdims), (x,),
                     lambda g: (np.array(_expand(g, x.shape, axis, keepdims)) / count,))


def max_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient flows to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis=axis)
        return (gx,)

    return custom_op(out if keepdims else np.squeeze(out, axis), (x,), backward)


def frobenius_norm_sq(x: Tensor) -> Tensor:
    return custom_op(np.sum(x.data * x.data), (x,), lambda g: (2.0 * g * x.data,))


# -- linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return custom_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads + ((g.sum(axis=0),) if bias is not None else ())

    return custom_op(out, parents, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (B, Cin, H, W) input with (Cout, Cin, kh, kw) weights."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weight {weight.shape}")
    bsz, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeMismatch(f"conv2d: bias {bias.shape} vs {cout} output channels")
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape)
        gcols = (gm @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        grads = (gx, gw)
        return grads + ((g.sum(axis=(0, 2, 3)),) if bias is not None else ())

    return custom_op(np.ascontiguousarray(out), parents, backward)


# -- normalization ---------------------------------------------------------------

@dataclass
class BatchNormState:
    num_features: int
    momentum: float = 0.9
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_features)
        if self.running_var is None:
            self.running_var = np.ones(self.num_features)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState | None = None,
              train: bool = True, eps: float = 1e-8) -> Tensor:
    """Batch normalization over every axis except axis 1 (channels).

    Train mode normalizes with biased batch statistics and folds them into
    ``state`` (``running = momentum * running + (1 - momentum) * batch``);
    eval mode uses the running statistics.
    """
    if x.ndim < 2:
        raise ShapeMismatch(f"batchnorm: need at least 2 dims, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batchnorm: gamma {gamma.shape}/beta {beta.shape} vs {c} channels")
    axes = tuple(a for a in range(x.ndim) if a != 1)
    bshape = [1] * x.ndim
    bshape[1] = c
    gam = gamma.data.reshape(bshape)

    if train:
        n = x.data.size // c
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if state is not None:
            m = state.momentum
            unbiased = var.reshape(c) * (n / max(n - 1, 1))
            state.running_mean = m * state.running_mean + (1.0 - m) * mu.reshape(c)
            state.running_var = m * state.running_var + (1.0 - m) * unbiased

        def backward(g):
            gxhat = g * gam
            gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        if state is None:
            raise ValueError("eval-mode batchnorm needs running statistics")
        inv = 1.0 / np.sqrt(state.running_var.reshape(bshape) + eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv

        def backward(g):
            return g * gam * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return custom_op(gam * xhat + beta.data.reshape(bshape), (x, gamma, beta), backward)


# -- shape manipulation -----------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}") from None
    return custom_op(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return custom_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return custom_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    if x.ndim < 2:
        raise ShapeMismatch(f"upsample2x: need at least 2 dims, got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    h, w = x.shape[-2:]

    def backward(g):
        return (g.reshape(*x.shape[:-2], h, 2, w, 2).sum(axis=(-3, -1)),)

    return custom_op(out, (x,), backward)


def avgpool2x(x: Tensor) -> Tensor:
    """2x2 mean pooling of the last two axes (even extents)."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeMismatch(f"avgpool2x: odd spatial shape {x.shape}")
    y = reshape(x, (*x.shape[:-2], h // 2, 2, w // 2, 2))
    return mean_over_axis(mean_over_axis(y, -1), -2)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.data)
        if axis == 0:
            np.add.at(gx, index, g)
        else:
            np.add.at(np.moveaxis(gx, axis, 0), index, np.moveaxis(g, axis, 0))
        return (gx,)

    return custom_op(np.take(x.data, index, axis=axis), (x,), backward)


def scatter_rows(x: Tensor, index, n_rows: int) -> Tensor:
    """Place row i of ``x`` at row ``index[i]`` of a zero array with ``n_rows`` rows."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[0],):
        raise ShapeMismatch(f"scatter_rows: {len(index)} indices for {x.shape[0]} rows")
    out = np.zeros((n_rows, *x.shape[1:]))
    if len(np.unique(index)) == len(index):
        out[index] = x.data
    else:
        np.add.at(out, index, x.data)
    return custom_op(out, (x,), lambda g: (g[index],))


def segment_max(x: Tensor, starts) -> Tensor:
    """Column-wise maximum over contiguous row segments of a 2-D tensor.

    Segment ``k`` spans rows ``starts[k]`` up to the next start. Segments must
    be non-empty; the gradient goes to the first maximal row.
    """
    from . import kernels

    starts = np.ascontiguousarray(starts, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeMismatch(f"segment_max: expected a 2-D tensor, got {x.shape}")
    n, c = x.shape
    if len(starts) == 0:
        return custom_op(np.zeros((0, c)), (x,), lambda g: (np.zeros_like(x.data),))
    if starts[0] != 0 or np.any(np.diff(starts) <= 0) or starts[-1] >= n:
        raise ShapeMismatch("segment_max: starts must begin at 0 and increase strictly within the rows")
    out, arg = kernels.segment_max(np.ascontiguousarray(x.data), starts)
    cols = np.broadcast_to(np.arange(c), arg.shape)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[arg, cols] = g
        return (gx,)

    return custom_op(out, (x,), backward)


# -- probabilities and losses -----------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return custom_op(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return custom_op(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def sigmoid_focal_loss(logits: Tensor, targets, weights=None, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed binary focal loss ``-a_t (1 - p_t)^gamma log p_t`` over hard 0/1 targets."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeMismatch(f"focal loss: targets {t.shape} vs logits {logits.shape}")
    w = np.ones_like(t) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), t.shape)
    sign = 2.0 * t - 1.0
    z = logits.data * sign
    log_pt = -np.logaddexp(0.0, -z)
    pt = np.exp(log_pt)
    one_m = 0.5 * (1.0 - np.tanh(0.5 * z))  # 1 - p_t, without cancellation
    alpha_t = np.where(t > 0.5, alpha, 1.0 - alpha)
    loss = -alpha_t * one_m ** gamma * log_pt

    def backward(g):
        dz = -alpha_t * (-gamma * one_m ** gamma * pt * log_pt + one_m ** (gamma + 1.0))
        return (g * w * dz * sign,)

    return custom_op(np.sum(w * loss), (logits,), backward)


def smooth_l1(x: Tensor, beta: float = 1.0, weights=None) -> Tensor:
    """Summed Huber-style loss: 0.5 x^2 / beta inside |x| < beta, |x| - beta/2 outside."""
    a = np.abs(x.data)
    inside = a < beta
    w = np.ones_like(x.data) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), x.shape)
    loss = np.where(inside, 0.5 * x.data * x.data / beta, a - 0.5 * beta)
    return custom_op(np.sum(w * loss), (x,),
                     lambda g: (g * w * np.where(inside, x.data / beta, np.sign(x.data)),))


def softmax_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Summed ``-log softmax(logits)[label]`` over rows of a (M, K) array."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    w = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    nll = lse - z[rows, labels]
    soft = np.exp(z - lse[:, None])

    def backward(g):
        gz = soft.copy()
        gz[rows, labels] -= 1.0
        return (g * w[:, None] * gz,)

    return custom_op(np.sum(w * nll), (logits,), backward)


# -- optimizers -------------------------------------------------------------------

def _grad_array(g) -> np.ndarray:
    return g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)


def sgd_step(params: Sequence[Tensor], grads, lr: float) -> Sequence[Tensor]:
    for p, g in zip(params, grads):
        g = _grad_array(g)
        if g.shape != p.shape:
            raise ShapeMismatch(f"sgd: gradient {g.shape} vs parameter {p.shape}")
        p.data = p.data - lr * g
    return params


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(params: Sequence[Tensor], grads, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place; returns ``(params, state)``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = _grad_array(g)
        if g.shape != p.shape:
            raise ShapeMismatch(f"adam: gradient {g.shape} vs parameter {p.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
    return params, state
