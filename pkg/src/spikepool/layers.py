"""Differentiable layers: conv2d, batch norm, pooling, linear.

Functional forms take and return :class:`~spikepool.autodiff.Tensor`. The
small ``Module`` classes below only hold parameters and running statistics in
a fixed, named order so that models can be counted and checkpointed.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, as_tensor, record

__all__ = [
    "conv2d", "batchnorm", "maxpool2d", "avgpool2d", "maxpool3d", "linear",
    "max_pool_nd", "avg_pool_nd",
    "Module", "Conv2d", "BatchNorm", "ConvBN", "Linear",
]


def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x[B,C,H,W]`` with ``weight[O,C,kH,kW]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kH, kW = weight.shape
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ValueError(f"invalid stride {stride} / padding {padding}")
    if H + 2 * ph < kH or W + 2 * pw < kW:
        raise ValueError(f"kernel {kH}x{kW} exceeds padded input {H + 2 * ph}x{W + 2 * pw}")
    Ho = (H + 2 * ph - kH) // sh + 1
    Wo = (W + 2 * pw - kW) // sw + 1
    wd = weight.data

    if kH == kW == 1 and sh == sw == 1 and ph == pw == 0:
        xd = x.data
        out = np.einsum("oc,bchw->bohw", wd[:, :, 0, 0], xd, optimize=True)

        def conv_backward(g):
            gx = np.einsum("oc,bohw->bchw", wd[:, :, 0, 0], g, optimize=True) if x.requires_grad else None
            gw = np.einsum("bohw,bchw->oc", g, xd, optimize=True)[:, :, None, None]
            return gx, gw
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
        cols = sliding_window_view(xp, (kH, kW), axis=(2, 3))[:, :, ::sh, ::sw]
        # [B, Ho, Wo, C*kH*kW] im2col buffer
        cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho, Wo, -1)
        out = (cols @ wd.reshape(O, -1).T).transpose(0, 3, 1, 2)

        def conv_backward(g):
            gt = g.transpose(0, 2, 3, 1)
            gw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(wd.shape)
            gx = None
            if x.requires_grad:
                gcols = (gt @ wd.reshape(O, -1)).reshape(B, Ho, Wo, C, kH, kW)
                gxp = np.zeros(xp.shape)
                for i in range(kH):
                    for j in range(kW):
                        gxp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += \
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, ph:ph + H, pw:pw + W]
            return gx, gw

    out = record(Tensor(np.ascontiguousarray(out)), (x, weight), conv_backward)
    if bias is not None:
        out = out + as_tensor(bias).reshape(1, O, 1, 1)
    return out


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Batch norm over channel axis 1 of ``x[N, C, ...]``.

    In training mode the running statistics are updated in place (unbiased
    variance, PyTorch convention).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[1] if x.ndim > 1 else -1
    if C != gamma.shape[0]:
        raise ValueError(f"batchnorm channel mismatch: input {x.shape}, params for {gamma.shape[0]}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    xd = x.data
    gd = gamma.data.reshape(bshape)
    if training:
        count = xd.size // C
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mean, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * invstd.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def fn(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                n = xd.size // C
                gx = (invstd.reshape(bshape) / n) * (
                    n * dxhat
                    - dxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
                )
            else:
                gx = dxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return record(Tensor(out), (x, gamma, beta), fn)


def _as_tuple(v, n: int) -> tuple[int, ...]:
    return (int(v),) * n if np.isscalar(v) else tuple(int(a) for a in v)


def _pad_pairs(padding, n: int) -> tuple[tuple[int, int], ...]:
    if np.isscalar(padding):
        return ((int(padding), int(padding)),) * n
    pairs = []
    for p in padding:
        pairs.append((int(p), int(p)) if np.isscalar(p) else (int(p[0]), int(p[1])))
    return tuple(pairs)


def _pool_geometry(shape, kernel, stride, padding):
    n = len(kernel)
    spatial = shape[-n:]
    out = []
    for size, k, s, (lo, hi) in zip(spatial, kernel, stride, padding):
        if k < 1 or s < 1:
            raise ValueError(f"invalid pooling kernel {kernel} / stride {stride}")
        if lo >= k or hi >= k:
            raise ValueError(f"padding {padding} must be smaller than kernel {kernel}")
        if size + lo + hi < k:
            raise ValueError(f"pooling window {kernel} larger than input {tuple(spatial)}")
        out.append((size + lo + hi - k) // s + 1)
    return tuple(out)


def _offset_slices(offs, stride, out_shape) -> tuple[slice, ...]:
    return tuple(slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offs, stride, out_shape))


def _scatter_windows(gxp: np.ndarray, contrib, kernel, stride, out_shape) -> None:
    """Add ``contrib(offset_index)`` into every window position of ``gxp``."""
    for flat, offs in enumerate(np.ndindex(*kernel)):
        gxp[(Ellipsis,) + _offset_slices(offs, stride, out_shape)] += contrib(flat)


def _crop(gxp: np.ndarray, padding, n: int) -> np.ndarray:
    sl = tuple(slice(lo, gxp.shape[gxp.ndim - n + i] - hi) for i, (lo, hi) in enumerate(padding))
    return gxp[(Ellipsis,) + sl]


def max_pool_nd(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    """Max pooling over the trailing ``len(kernel)`` axes.

    Padding may be given per axis as ``(before, after)``; padded cells never
    win. Backward routes each window's gradient to its first maximum in
    row-major window order.
    """
    x = as_tensor(x)
    kernel = tuple(int(k) for k in kernel)
    n = len(kernel)
    stride = kernel if stride is None else _as_tuple(stride, n)
    padding = _pad_pairs(padding, n)
    if x.ndim < n:
        raise ValueError(f"input rank {x.ndim} too small for {n}-d pooling")
    out_shape = _pool_geometry(x.shape, kernel, stride, padding)
    pad = ((0, 0),) * (x.ndim - n) + padding
    xp = np.pad(x.data, pad, constant_values=-np.inf) if any(sum(p) for p in padding) else x.data
    views = [xp[(Ellipsis,) + _offset_slices(offs, stride, out_shape)] for offs in np.ndindex(*kernel)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def fn(g):
        # first maximum in row-major window order takes the gradient
        gxp = np.zeros(xp.shape)
        free = np.ones(out.shape, dtype=bool)
        for offs, v in zip(np.ndindex(*kernel), views):
            hit = (v == out) & free
            gxp[(Ellipsis,) + _offset_slices(offs, stride, out_shape)] += g * hit
            free &= ~hit
        return (_crop(gxp, padding, n),)

    return record(Tensor(out), (x,), fn)


def avg_pool_nd(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    """Mean pooling over trailing axes; zero padding counts toward the mean."""
    x = as_tensor(x)
    kernel = tuple(int(k) for k in kernel)
    n = len(kernel)
    stride = kernel if stride is None else _as_tuple(stride, n)
    padding = _pad_pairs(padding, n)
    out_shape = _pool_geometry(x.shape, kernel, stride, padding)
    pad = ((0, 0),) * (x.ndim - n) + padding
    xp = np.pad(x.data, pad) if any(sum(p) for p in padding) else x.data
    count = int(np.prod(kernel))
    out = np.zeros(tuple(x.shape[: x.ndim - n]) + out_shape)
    for offs in np.ndindex(*kernel):
        out += xp[(Ellipsis,) + _offset_slices(offs, stride, out_shape)]
    out /= count

    def fn(g):
        gxp = np.zeros(xp.shape)
        share = g / count
        _scatter_windows(gxp, lambda k: share, kernel, stride, out_shape)
        return (_crop(gxp, padding, n),)

    return record(Tensor(out), (x,), fn)


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    return max_pool_nd(x, (k, k), stride if stride is not None else k, padding)


def avgpool2d(x: Tensor, k: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    return avg_pool_nd(x, (k, k), stride if stride is not None else k, padding)


def maxpool3d(x: Tensor, kernel=(2, 3, 3), stride=(1, 1, 1), padding=((1, 0), (1, 1), (1, 1))) -> Tensor:
    """Joint (T, H, W) max pooling of ``x[T, B, C, H, W]``.

    The default pads one frame in front of the sequence so that T is kept and
    each output step sees only the current and previous frame.
    """
    x = as_tensor(x)
    if x.ndim != 5:
        raise ValueError(f"maxpool3d expects [T,B,C,H,W], got {x.shape}")
    moved = x.transpose(1, 2, 0, 3, 4)
    pooled = max_pool_nd(moved, kernel, stride, padding)
    return pooled.transpose(2, 0, 1, 3, 4)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight[out, in]``."""
    out = as_tensor(x) @ as_tensor(weight).T
    return out + bias if bias is not None else out


# -- parameter containers ----------------------------------------------------

def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Named, ordered bag of parameters, buffers and sub-modules."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor):
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int = 0, bias: bool = False, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.stride, self.padding = stride, padding
        self.weight = _uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in)
        self.bias = _uniform(rng, (out_ch,), fan_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                         training, self.momentum, self.eps)


class ConvBN(Module):
    """BN(Conv(x)) applied to ``x[..., C, H, W]``; leading axes are folded."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, 1, kernel // 2 if padding is None else padding, rng=rng)
        self.bn = BatchNorm(out_ch)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        lead = x.shape[:-3]
        flat = x.reshape((-1,) + x.shape[-3:])
        y = self.bn(self.conv(flat), training)
        return y.reshape(lead + y.shape[1:])


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _uniform(rng, (out_features, in_features), in_features)
        if bias:
            self.bias = _uniform(rng, (out_features,), in_features)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
