"""Differentiable network operations on N x C x H x W tensors.

Every function also accepts a single C x H x W example and returns the
matching unbatched result. Convolutions carry no bias term and take explicit
symmetric zero padding; "same" padding is the caller's business.
"""

from __future__ import annotations

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor import Function, Tensor


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _check_geometry(h, w, kh, kw, stride, ph, pw):
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise DimensionError(f"kernel {kh}x{kw} does not fit padded input {h + 2 * ph}x{w + 2 * pw}")


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph : ph + h, pw : pw + w] = x
    return out


def _batched(fn):
    """Lift a 4-D op so it also takes one C x H x W example."""

    def wrapper(x: Tensor, *args, **kwargs) -> Tensor:
        if x.ndim == 3:
            y = fn(x.reshape((1,) + x.shape), *args, **kwargs)
            return y.reshape(y.shape[1:])
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# -- dense convolution -------------------------------------------------------


class Conv2d(Function):
    def forward(self, x, w, stride=1, padding=(0, 0)):
        ph, pw = padding
        n, cin, h, wd = x.shape
        cout, wcin, kh, kw = w.shape
        if cin != wcin:
            raise DimensionError(f"input has {cin} channels but weight expects {wcin}")
        _check_geometry(h, wd, kh, kw, stride, ph, pw)
        self.x_shape, self.stride, self.pad = x.shape, stride, (ph, pw)
        self.w = w
        self.pointwise = kh == kw == 1 and stride == 1 and ph == pw == 0
        if self.pointwise:
            self.x = x
            return np.matmul(w[:, :, 0, 0], x.reshape(n, cin, h * wd)).reshape(n, cout, h, wd)
        xp = _pad(x, ph, pw)
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        self.cols = cols
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad, needs):
        n, cin, h, wd = self.x_shape
        cout, _, kh, kw = self.w.shape
        gx = gw = None
        if self.pointwise:
            g2 = grad.reshape(n, cout, h * wd)
            if needs[0]:
                gx = np.matmul(self.w[:, :, 0, 0].T, g2).reshape(self.x_shape)
            if needs[1]:
                gw = np.tensordot(g2, self.x.reshape(n, cin, h * wd), axes=([0, 2], [0, 2]))
                gw = gw.reshape(self.w.shape)
            return gx, gw
        s = self.stride
        ph, pw = self.pad
        ho, wo = grad.shape[2], grad.shape[3]
        if needs[1]:
            gw = np.tensordot(grad, self.cols, axes=([0, 2, 3], [0, 2, 3]))
        if needs[0]:
            gcols = np.tensordot(grad, self.w, axes=([1], [0]))  # n, ho, wo, cin, kh, kw
            gxp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw), dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph : ph + h, pw : pw + wd]
        return gx, gw


@_batched
def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding=0) -> Tensor:
    """Cross-correlate ``x`` with ``weight`` (C_out x C_in x kh x kw)."""
    if weight.ndim != 4 or x.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D weight and input, got {weight.shape}, {x.shape}")
    return Conv2d.apply(x, weight, stride=int(stride), padding=_pair(padding))


# -- depthwise convolution ---------------------------------------------------


@numba.njit(cache=True, fastmath=True)
def _dw_forward(xp, w, stride, ho, wo):
    n_, c_ = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((n_, c_, ho, wo), xp.dtype)
    for n in range(n_):
        for c in range(c_):
            for h in range(ho):
                orow = out[n, c, h]
                for i in range(kh):
                    xrow = xp[n, c, h * stride + i]
                    for j in range(kw):
                        wij = w[c, i, j]
                        for q in range(wo):
                            orow[q] += wij * xrow[q * stride + j]
    return out


@numba.njit(cache=True, fastmath=True)
def _dw_backward_input(g, w, stride, hp, wp):
    n_, c_, ho, wo = g.shape
    kh, kw = w.shape[1], w.shape[2]
    gxp = np.zeros((n_, c_, hp, wp), g.dtype)
    for n in range(n_):
        for c in range(c_):
            for h in range(ho):
                grow = g[n, c, h]
                for i in range(kh):
                    xrow = gxp[n, c, h * stride + i]
                    for j in range(kw):
                        wij = w[c, i, j]
                        for q in range(wo):
                            xrow[q * stride + j] += wij * grow[q]
    return gxp


@numba.njit(cache=True, fastmath=True)
def _dw_backward_weight(g, xp, stride, kh, kw):
    n_, c_, ho, wo = g.shape
    gw = np.zeros((c_, kh, kw), np.float64)
    acc = np.zeros((kh, kw), np.float64)
    for c in range(c_):
        acc[:, :] = 0.0
        for n in range(n_):
            for h in range(ho):
                grow = g[n, c, h]
                for i in range(kh):
                    xrow = xp[n, c, h * stride + i]
                    for j in range(kw):
                        part = 0.0
                        for q in range(wo):
                            part += grow[q] * xrow[q * stride + j]
                        acc[i, j] += part
        gw[c] = acc
    return gw


class DepthwiseConv2d(Function):
    def forward(self, x, w, stride=1, padding=(0, 0)):
        ph, pw = padding
        n, c, h, wd = x.shape
        if w.shape[0] != c:
            raise DimensionError(f"input has {c} channels but {w.shape[0]} depthwise kernels given")
        kh, kw = w.shape[1], w.shape[2]
        _check_geometry(h, wd, kh, kw, stride, ph, pw)
        ho, wo = out_size(h, kh, stride, ph), out_size(wd, kw, stride, pw)
        xp = np.ascontiguousarray(_pad(x, ph, pw))
        w = np.ascontiguousarray(w, dtype=x.dtype)
        self.xp, self.w, self.stride, self.pad, self.x_shape = xp, w, stride, (ph, pw), x.shape
        return _dw_forward(xp, w, stride, ho, wo)

    def backward(self, grad, needs):
        grad = np.ascontiguousarray(grad)
        n, c, h, wd = self.x_shape
        ph, pw = self.pad
        kh, kw = self.w.shape[1], self.w.shape[2]
        gx = gw = None
        if needs[0]:
            gxp = _dw_backward_input(grad, self.w, self.stride, self.xp.shape[2], self.xp.shape[3])
            gx = gxp[:, :, ph : ph + h, pw : pw + wd]
        if needs[1]:
            gw = _dw_backward_weight(grad, self.xp, self.stride, kh, kw).astype(grad.dtype)
        return gx, gw


@_batched
def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding=0) -> Tensor:
    """Per-channel convolution; ``weight`` is C x kh x kw, one kernel per channel."""
    if weight.ndim != 3 or x.ndim != 4:
        raise DimensionError(f"depthwise_conv2d expects 3-D weight and 4-D input, got {weight.shape}, {x.shape}")
    return DepthwiseConv2d.apply(x, weight, stride=int(stride), padding=_pair(padding))


# -- elementwise and reductions ------------------------------------------------


@numba.njit(cache=True)
def _relu6_backward(grad, x):
    flat_g = grad.ravel()
    flat_x = x.ravel()
    out = np.empty_like(flat_g)
    for i in range(flat_g.size):
        v = flat_x[i]
        out[i] = flat_g[i] if 0 < v < 6 else 0
    return out.reshape(grad.shape)


class ReLU6(Function):
    def forward(self, x):
        self.x = x
        return np.clip(x, 0, 6)

    def backward(self, grad, needs):
        return (_relu6_backward(np.ascontiguousarray(grad), np.ascontiguousarray(self.x)),)


def relu6(x: Tensor) -> Tensor:
    """min(max(x, 0), 6); the gradient is 1 strictly inside (0, 6) and 0 elsewhere."""
    return ReLU6.apply(x)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Sigmoid(Function):
    def forward(self, x):
        self.y = _sigmoid(x)
        return self.y

    def backward(self, grad, needs):
        return (grad * self.y * (1 - self.y),)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


class GlobalAvgPool(Function):
    def forward(self, x):
        self.shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad, needs):
        h, w = self.shape[2], self.shape[3]
        return (np.broadcast_to(grad / (h * w), self.shape).copy(),)


@_batched
def global_avg_pool(x: Tensor) -> Tensor:
    """Average each channel over all spatial positions (N x C x 1 x 1)."""
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError("global_avg_pool needs non-empty spatial dims")
    return GlobalAvgPool.apply(x)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, labels=None):
        n, k = logits.shape
        logp = log_softmax(logits, axis=1)
        self.probs = np.exp(logp)
        self.labels = labels
        return np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(self, grad, needs):
        n = self.probs.shape[0]
        g = self.probs.copy()
        g[np.arange(n), self.labels] -= 1
        return (g * (grad / n),)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    return SoftmaxCrossEntropy.apply(logits, labels=labels)
