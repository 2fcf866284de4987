"""Differentiable primitives built on :class:`Tensor`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import DimensionError, NumericDomainError, StateError
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- activations ----------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    x = _t(x)
    out = np.exp(-np.logaddexp(0.0, -x.data))
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), overflow-safe."""
    x = _t(x)
    out = np.logaddexp(0.0, x.data)
    sig = np.exp(-np.logaddexp(0.0, -x.data))
    return Tensor._make(out, (x,), lambda g: (g * sig,))


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    # slope-1 branch at exactly 0
    x = _t(x)
    slope = np.where(x.data >= 0, 1.0, alpha)
    return Tensor._make(x.data * slope, (x,), lambda g: (g * slope,))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    x = _t(x)
    neg = x.data < 0
    em1 = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(neg, alpha * em1, x.data)
    slope = np.where(neg, alpha * (em1 + 1.0), 1.0)
    return Tensor._make(out, (x,), lambda g: (g * slope,))


ACTIVATIONS = {
    "elu": elu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
}


def get_activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        from ..exceptions import ConfigurationError

        raise ConfigurationError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}")


# -- softmax --------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis`` with max subtraction.

    ``mask`` (broadcastable boolean, True = keep) removes entries entirely:
    they get probability 0 and receive zero gradient.
    """
    x = _t(x)
    if np.isnan(x.data).any():
        raise NumericDomainError("softmax input contains NaN")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of an n x m matrix."""
    x = _t(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=1)


# -- batch normalization ----------------------------------------------------------


class RunningStats:
    """Per-channel running mean/variance; empty until the first train-mode pass."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM):
        self.channels = channels
        self.momentum = momentum
        self.mean: np.ndarray | None = None
        self.var: np.ndarray | None = None

    @property
    def populated(self) -> bool:
        return self.mean is not None

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if self.mean is None:
            self.mean = mean.copy()
            self.var = var.copy()
        else:
            m = self.momentum
            self.mean = (1 - m) * self.mean + m * mean
            self.var = (1 - m) * self.var + m * var


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "train",
    running: RunningStats | None = None,
    row_mask: np.ndarray | None = None,
    update_stats: bool = True,
    eps: float = BN_EPS,
) -> Tensor:
    """Normalize channels (last axis) over every other axis.

    In train mode the batch statistics use the population variance over the
    rows selected by ``row_mask`` (all rows when None); running stats are
    updated with momentum when ``running`` is given. Eval mode uses the
    running stats only. Rows outside ``row_mask`` come out as exact zeros.
    """
    x = _t(x)
    c = x.shape[-1]
    red = tuple(range(x.ndim - 1))
    if mode == "train":
        if row_mask is None:
            n = int(np.prod(x.shape[:-1]))
            if n < 1:
                raise DimensionError("batch_norm needs at least one row")
            mean = x.mean(axis=red, keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=red, keepdims=True)
        else:
            m = Tensor(row_mask.astype(np.float64)[..., None])
            n = float(row_mask.sum())
            if n < 1:
                raise DimensionError("batch_norm needs at least one valid row")
            mean = (x * m).sum(axis=red, keepdims=True) * (1.0 / n)
            centered = (x - mean) * m
            var = (centered * centered).sum(axis=red, keepdims=True) * (1.0 / n)
        if running is not None and update_stats:
            running.update(mean.data.reshape(c), var.data.reshape(c))
        out = centered / (var + eps).sqrt() * gamma + beta
    elif mode == "eval":
        if running is None or not running.populated:
            raise StateError("batch_norm in eval mode requires populated running statistics")
        scale = 1.0 / np.sqrt(running.var + eps)
        out = (x - Tensor(running.mean)) * Tensor(scale) * gamma + beta
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if row_mask is not None:
        out = out * Tensor(row_mask.astype(np.float64)[..., None])
    return out


# -- 3D convolution and pooling ---------------------------------------------------


def conv3d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. x: (n, cin, D, H, W); w: (cout, cin, k, k, k)."""
    x, w = _t(x), _t(w)
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D input and weights, got {x.shape} and {w.shape}")
    n, cin, D, H, W = x.shape
    cout, wcin, kd, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(f"conv3d channel mismatch: input {x.shape}, weights {w.shape}")
    p = padding
    if kd > D + 2 * p or kh > H + 2 * p or kw > W + 2 * p:
        raise DimensionError(f"kernel {w.shape[2:]} larger than padded input {(D + 2 * p, H + 2 * p, W + 2 * p)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    # win: (n, cin, Do, Ho, Wo, kd, kh, kw)
    Do, Ho, Wo = win.shape[2:5]
    if kd == kh == kw == 1:
        out = np.einsum("ncdhw,oc->nodhw", win[..., 0, 0, 0], w.data[:, :, 0, 0, 0], optimize=True)
    else:
        out = np.tensordot(win, w.data, axes=([1, 5, 6, 7], [1, 2, 3, 4])).transpose(0, 4, 1, 2, 3)

    def backward(g):
        # g: (n, cout, Do, Ho, Wo)
        gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # (cout, cin, kd, kh, kw)
        gxp = np.zeros_like(xp)
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    contrib = np.tensordot(g, w.data[:, :, a, b, c], axes=([1], [0]))  # n,Do,Ho,Wo,cin
                    gxp[
                        :,
                        :,
                        a : a + stride * Do : stride,
                        b : b + stride * Ho : stride,
                        c : c + stride * Wo : stride,
                    ] += contrib.transpose(0, 4, 1, 2, 3)
        gx = gxp[:, :, p : p + D, p : p + H, p : p + W] if p else gxp
        return gx, gw

    return Tensor._make(np.ascontiguousarray(out), (x, w), backward)


def avg_pool3d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling with window = stride = ``size``."""
    x = _t(x)
    n, c, D, H, W = x.shape
    if D % size or H % size or W % size:
        raise DimensionError(f"spatial dims {x.shape[2:]} not divisible by pool size {size}")
    s = size
    out = x.data.reshape(n, c, D // s, s, H // s, s, W // s, s).mean(axis=(3, 5, 7))

    def backward(g):
        gx = np.repeat(np.repeat(np.repeat(g, s, axis=2), s, axis=3), s, axis=4) / s**3
        return (gx,)

    return Tensor._make(out, (x,), backward)


def global_avg_pool3d(x: Tensor) -> Tensor:
    """(n, c, D, H, W) -> (n, c)."""
    return _t(x).mean(axis=(2, 3, 4))
