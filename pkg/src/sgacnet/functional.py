"""Differentiable dense-tensor kernels.

Every public function accepts :class:`~sgacnet.tensor.Tensor` (or anything
``np.asarray`` accepts), computes its result with numpy, and registers the
matching adjoint on the active tape. Spatial tensors use the (n, c, h, w)
layout throughout.

Conventions worth knowing:

* ``conv2d`` is cross-correlation (no kernel flip) with zero padding.
* Adaptive average pooling bin ``i`` of ``out`` over a length-``h`` axis covers
  ``[floor(i*h/out), ceil((i+1)*h/out))``. Bins may exceed the input size, in
  which case input cells are shared between neighbouring bins.
* Bilinear upsampling uses half-pixel centres without corner alignment: output
  index ``o`` samples source coordinate ``max((o + 0.5) / s - 0.5, 0)`` with
  weights ``1 - frac`` and ``frac`` on the two neighbouring rows (the upper one
  clamped to the last row).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DataError, DimensionError, InvalidSpecError
from .tensor import Tensor, as_tensor, check_4d, make_output

__all__ = [
    "ConvSpec", "conv2d", "adaptive_avg_pool", "global_avg_pool", "max_pool2d",
    "upsample", "resize_nearest", "channel_shuffle", "add", "sub", "mul", "scale",
    "relu", "sigmoid", "power", "batch_norm", "linear", "reshape", "concat",
    "matmul", "mean", "sum", "softmax_cross_entropy",
]

# Optional MAC counter hook, installed by sgacnet.cost.count_flops.
_MAC_HOOKS: list = []


def _count_macs(op: str, macs: int) -> None:
    for hook in _MAC_HOOKS:
        hook(op, int(macs))


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise InvalidSpecError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Kernel geometry of a 2-D convolution."""

    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1

    @classmethod
    def make(cls, kernel=1, stride=1, padding=0, dilation=1, groups=1) -> "ConvSpec":
        spec = cls(_pair(kernel), _pair(stride), _pair(padding), _pair(dilation), int(groups))
        if min(spec.kernel) < 1 or min(spec.stride) < 1 or min(spec.dilation) < 1:
            raise InvalidSpecError(f"kernel, stride and dilation must be >= 1: {spec}")
        if min(spec.padding) < 0:
            raise InvalidSpecError(f"padding must be >= 0: {spec}")
        if spec.groups < 1:
            raise InvalidSpecError(f"groups must be positive: {spec}")
        return spec

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        out = []
        for size, k, s, p, d, axis in zip((h, w), self.kernel, self.stride, self.padding,
                                          self.dilation, "hw"):
            o = (size + 2 * p - d * (k - 1) - 1) // s + 1
            if o < 1:
                raise InvalidSpecError(f"convolution produces empty output along {axis}: "
                                       f"size {size}, kernel {k}, dilation {d}, padding {p}")
            out.append(o)
        return out[0], out[1]


def _windows(xp: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """Strided view (n, c, kh, kw, oh, ow) over a padded input."""
    n, c, _, _ = xp.shape
    kh, kw = spec.kernel
    sh, sw = spec.stride
    dh, dw = spec.dilation
    s = xp.strides
    return as_strided(xp, shape=(n, c, kh, kw, oh, ow),
                      strides=(s[0], s[1], s[2] * dh, s[3] * dw, s[2] * sh, s[3] * sw),
                      writeable=False)


def _tap(arr: np.ndarray, i: int, j: int, spec: ConvSpec, oh: int, ow: int):
    """Slice of a padded map read by kernel tap (i, j)."""
    dh, dw = spec.dilation
    sh, sw = spec.stride
    r0, c0 = i * dh, j * dw
    return (slice(None), slice(None),
            slice(r0, r0 + sh * (oh - 1) + 1, sh), slice(c0, c0 + sw * (ow - 1) + 1, sw))


def _pad(x: np.ndarray, spec: ConvSpec, value=0.0) -> np.ndarray:
    ph, pw = spec.padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _conv_dense(xp, w, spec, oh, ow):
    cols = _windows(xp, spec, oh, ow)
    out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))  # (n, oh, ow, co)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_dense_adjoint(xp, w, g, spec, oh, ow):
    cols = _windows(xp, spec, oh, ow)
    gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # (co, c, kh, kw)
    dcols = np.tensordot(w, g, axes=([0], [1]))  # (c, kh, kw, n, oh, ow)
    gxp = np.zeros_like(xp)
    kh, kw = spec.kernel
    for i in range(kh):
        for j in range(kw):
            gxp[_tap(gxp, i, j, spec, oh, ow)] += dcols[:, i, j].transpose(1, 0, 2, 3)
    return gxp, gw


def _conv_depthwise(xp, w, spec, oh, ow):
    kh, kw = spec.kernel
    out = None
    for i in range(kh):
        for j in range(kw):
            term = xp[_tap(xp, i, j, spec, oh, ow)] * w[None, :, 0, i, j, None, None]
            out = term if out is None else out + term
    return np.ascontiguousarray(out)


def _conv_depthwise_adjoint(xp, w, g, spec, oh, ow):
    kh, kw = spec.kernel
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            sl = _tap(xp, i, j, spec, oh, ow)
            gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
            gxp[sl] += g * w[None, :, 0, i, j, None, None]
    return gxp, gw


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1, groups=1) -> Tensor:
    """Direct 2-D cross-correlation.

    Parameters
    ----------
    x : Tensor (n, c_in, h, w)
    weight : Tensor (c_out, c_in / groups, kh, kw)
    bias : Tensor (c_out,), optional
    stride, padding, dilation : int or pair
    groups : int
        ``groups == c_in == c_out`` takes the depthwise path.

    Raises
    ------
    DimensionError
        If the channel axes of ``x`` and ``weight`` disagree.
    InvalidSpecError
        If the geometry yields an empty output or groups do not divide channels.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    check_4d(x)
    if weight.ndim != 4:
        raise DimensionError(f"weight must be rank 4, got {weight.shape}", axis="rank")
    co, cpg, kh, kw = weight.shape
    spec = ConvSpec.make((kh, kw), stride, padding, dilation, groups)
    n, c, h, w = x.shape
    g_ = spec.groups
    if c % g_ or co % g_:
        raise InvalidSpecError(f"groups={g_} must divide c_in={c} and c_out={co}")
    if cpg * g_ != c:
        raise DimensionError(f"weight expects {cpg * g_} input channels, input has {c}", axis="c")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise DimensionError(f"bias must have shape ({co},), got {bias.shape}", axis="c")
    oh, ow = spec.output_size(h, w)
    _count_macs("conv2d", n * co * cpg * kh * kw * oh * ow)

    xp = _pad(x.data, spec)
    wd = weight.data
    depthwise = g_ == c == co and cpg == 1
    if g_ == 1:
        out = _conv_dense(xp, wd, spec, oh, ow)
    elif depthwise:
        out = _conv_depthwise(xp, wd, spec, oh, ow)
    else:
        cog = co // g_
        out = np.concatenate([
            _conv_dense(xp[:, k * cpg:(k + 1) * cpg], wd[k * cog:(k + 1) * cog], spec, oh, ow)
            for k in range(g_)], axis=1)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    ph, pw = spec.padding

    def adjoint(g):
        if g_ == 1:
            gxp, gw = _conv_dense_adjoint(xp, wd, g, spec, oh, ow)
        elif depthwise:
            gxp, gw = _conv_depthwise_adjoint(xp, wd, g, spec, oh, ow)
        else:
            cog = co // g_
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(wd)
            for k in range(g_):
                a, b = _conv_dense_adjoint(xp[:, k * cpg:(k + 1) * cpg], wd[k * cog:(k + 1) * cog],
                                           g[:, k * cog:(k + 1) * cog], spec, oh, ow)
                gxp[:, k * cpg:(k + 1) * cpg] = a
                gw[k * cog:(k + 1) * cog] = b
        gx = gxp[:, :, ph:ph + h, pw:pw + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv2d", out.astype(x.dtype, copy=False), inputs,
                       adjoint if bias is not None else (lambda g: adjoint(g)[:2]))


def max_pool2d(x, kernel=3, stride=2, padding=1) -> Tensor:
    """Max pooling with implicit -inf padding; ties resolve to the first tap."""
    x = as_tensor(x)
    check_4d(x)
    spec = ConvSpec.make(kernel, stride, padding)
    n, c, h, w = x.shape
    oh, ow = spec.output_size(h, w)
    xp = _pad(x.data, spec, value=-np.inf)
    kh, kw = spec.kernel
    win = _windows(xp, spec, oh, ow).reshape(n, c, kh * kw, oh, ow)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]
    ph, pw = spec.padding

    def adjoint(g):
        gxp = np.zeros_like(xp)
        for t in range(kh * kw):
            i, j = divmod(t, kw)
            gxp[_tap(gxp, i, j, spec, oh, ow)] += np.where(arg == t, g, 0.0)
        return (gxp[:, :, ph:ph + h, pw:pw + w],)

    return make_output("max_pool2d", np.ascontiguousarray(out), (x,), adjoint)


# --------------------------------------------------------------------------
# resampling (all separable linear maps: out = A @ x @ B^T per channel)
# --------------------------------------------------------------------------

def _separable(op: str, x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    out = rows @ x.data @ cols.T

    def adjoint(g):
        return (rows.T @ g @ cols,)

    return make_output(op, out, (x,), adjoint)


def pool_matrix(size: int, bins: int) -> np.ndarray:
    """Row-stochastic (bins, size) matrix averaging each adaptive bin."""
    m = np.zeros((bins, size))
    for i in range(bins):
        lo = (i * size) // bins
        hi = -((-(i + 1) * size) // bins)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def bilinear_matrix(size: int, scale: int) -> np.ndarray:
    """(size*scale, size) interpolation weights, half-pixel centres, edge clamp."""
    out = size * scale
    m = np.zeros((out, size))
    for o in range(out):
        src = max((o + 0.5) / scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def nearest_matrix(size: int, out: int) -> np.ndarray:
    """One-hot (out, size) matrix mapping output row o to input floor(o*size/out)."""
    m = np.zeros((out, size))
    m[np.arange(out), (np.arange(out) * size) // out] = 1.0
    return m


def adaptive_avg_pool(x, out_h: int, out_w: int) -> Tensor:
    """Average over the adaptive bins described in the module docstring."""
    x = as_tensor(x)
    check_4d(x)
    if out_h < 1 or out_w < 1:
        raise InvalidSpecError(f"pool target must be positive, got ({out_h}, {out_w})")
    _, _, h, w = x.shape
    return _separable("adaptive_avg_pool", x, pool_matrix(h, out_h), pool_matrix(w, out_w))


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    check_4d(x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def adjoint(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return make_output("global_avg_pool", out, (x,), adjoint)


def upsample(x, mode: str = "nearest", scale: int = 2) -> Tensor:
    """Integer-factor upsampling, ``mode`` in {"nearest", "bilinear"}."""
    x = as_tensor(x)
    check_4d(x)
    scale = int(scale)
    if scale < 1:
        raise InvalidSpecError(f"scale must be >= 1, got {scale}")
    if mode == "nearest":
        if scale == 1:
            return make_output("upsample", x.data.copy(), (x,), lambda g: (g,))
        n, c, h, w = x.shape
        out = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)

        def adjoint(g):
            return (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

        return make_output("upsample", out, (x,), adjoint)
    if mode == "bilinear":
        _, _, h, w = x.shape
        return _separable("upsample", x, bilinear_matrix(h, scale), bilinear_matrix(w, scale))
    raise InvalidSpecError(f"unknown upsample mode {mode!r}")


def resize_nearest(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    check_4d(x)
    _, _, h, w = x.shape
    return _separable("resize_nearest", x, nearest_matrix(h, out_h), nearest_matrix(w, out_w))


def channel_shuffle(x, groups: int) -> Tensor:
    """Output channel j takes input channel (j mod g)·(c/g) + j // g."""
    x = as_tensor(x)
    check_4d(x)
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise InvalidSpecError(f"channel count {c} not divisible by groups {groups}")
    out = x.data.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)

    def adjoint(g):
        return (g.reshape(n, c // groups, groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w),)

    return make_output("channel_shuffle", out, (x,), adjoint)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.ndim != b.ndim:
        raise DimensionError(f"{op}: rank mismatch {a.shape} vs {b.shape}", axis="rank")
    names = "nchw" if a.ndim == 4 else [str(i) for i in range(a.ndim)]
    for axis, p, q in zip(names, a.shape, b.shape):
        if p != q and p != 1 and q != 1:
            raise DimensionError(f"{op}: incompatible sizes {p} and {q} on axis {axis} "
                                 f"({a.shape} vs {b.shape})", axis=axis)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _binary(op, a, b, fn, da, db):
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        b = Tensor(np.asarray(b, dtype=a.dtype))
        b_shape = None
    else:
        b = as_tensor(b)
        _broadcast_shape(a, b, op)
        b_shape = b.shape
    out = fn(a.data, b.data)

    def adjoint(g):
        ga = _unbroadcast(da(g, a.data, b.data), a.shape)
        gb = None
        if b_shape is not None and b.requires_grad:
            gb = _unbroadcast(db(g, a.data, b.data), b.shape)
        return ga, gb

    return make_output(op, out, (a, b), adjoint)


def add(a, b) -> Tensor:
    """Elementwise sum; a size-1 axis broadcasts (e.g. (n, c, 1, 1) gates)."""
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    """Elementwise product with the same broadcasting rule as :func:`add`."""
    return _binary("mul", a, b, np.multiply,
                   lambda g, x, y: np.broadcast_to(g * y, np.broadcast_shapes(g.shape, x.shape)),
                   lambda g, x, y: g * x)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    f = float(factor)
    return make_output("scale", x.data * f, (x,), lambda g: (g * f,))


def relu(x) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    x = as_tensor(x)
    mask = x.data > 0
    return make_output("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                       lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    """1 / (1 + exp(-x)), evaluated without overflow."""
    x = as_tensor(x)
    y = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype, copy=False)
    return make_output("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    y = x.data ** p
    return make_output("power", y, (x,), lambda g: (g * p * x.data ** (p - 1),))


# --------------------------------------------------------------------------
# normalisation and dense layers
# --------------------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation.

    Training mode normalises with the biased batch variance and updates the
    running buffers in place: ``mean <- (1-m)*mean + m*batch_mean`` and the
    same for the variance using the unbiased batch estimate. Eval mode uses
    the buffers unchanged.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    check_4d(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)", axis="c")
    gam = gamma.data[None, :, None, None]
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1 - momentum
        running_mean += momentum * mu.ravel()
        unbiased = var.ravel() * (m / (m - 1)) if m > 1 else var.ravel()
        running_var *= 1 - momentum
        running_var += momentum * unbiased

        def adjoint(g):
            gxhat = g * gam
            gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)[None, :, None, None]
        xhat = (x.data - running_mean.astype(x.dtype)[None, :, None, None]) * inv

        def adjoint(g):
            return g * gam * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = (xhat * gam + beta.data[None, :, None, None]).astype(x.dtype, copy=False)
    return make_output("batch_norm", out, (x, gamma, beta), adjoint)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of shape (n, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear expects 2-D input and weight, got {x.shape}, {weight.shape}",
                             axis="rank")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} features, weight expects {weight.shape[1]}",
                             axis="in")
    out = x.data @ weight.data.T
    _count_macs("linear", x.shape[0] * weight.shape[0] * weight.shape[1])
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias must have shape ({weight.shape[0]},)", axis="out")
        out = out + bias.data

        return make_output("linear", out, (x, weight, bias),
                           lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)))
    return make_output("linear", out, (x, weight), lambda g: (g @ weight.data, g.T @ x.data))


# --------------------------------------------------------------------------
# structural
# --------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_output("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ref = xs[0].shape
    for t in xs[1:]:
        for ax, (p, q) in enumerate(zip(ref, t.shape)):
            if ax != axis % len(ref) and p != q:
                raise DimensionError(f"concat: size mismatch on axis {ax}: {ref} vs {t.shape}", axis=ax)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def adjoint(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_output("concat", np.concatenate([t.data for t in xs], axis=axis), xs, adjoint)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner sizes differ {a.shape} @ {b.shape}", axis="inner")
    out = a.data @ b.data
    _count_macs("matmul", out.size * a.shape[-1])
    return make_output("matmul", out, (a, b),
                       lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g))


def mean(x, axis=None, keepdims: bool = True) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1)
    shape = x.data.mean(axis=axis, keepdims=True).shape

    def adjoint(g):
        return (np.broadcast_to(g.reshape(shape) / count, x.shape).copy(),)

    return make_output("mean", out, (x,), adjoint)


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return make_output("sum", np.asarray(x.data.sum()), (x,),
                       lambda g: (np.broadcast_to(g, x.shape).copy(),))


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def softmax_cross_entropy(logits, labels: np.ndarray, ignore_index: int = 255) -> tuple[Tensor, int]:
    """Mean pixel cross-entropy of softmax(logits) against integer labels.

    Returns the scalar loss tensor and the number of scored pixels. When no
    pixel is scored the loss is exactly zero with a zero gradient.

    Raises
    ------
    DataError
        For a label outside ``[0, n_classes)`` that is not ``ignore_index``;
        the message names the first offending pixel as (n, y, x).
    """
    logits = as_tensor(logits)
    check_4d(logits, "logits")
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise DimensionError(f"labels shape {labels.shape} != {(n, h, w)}", axis="labels")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        pix = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {int(labels[pix])} at pixel (n, y, x)={pix} outside [0, {k})")
    count = int(valid.sum())
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count if count else 0.0

    def adjoint(g):
        if not count:
            return (np.zeros_like(logits.data),)
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return ((p - onehot) * valid[:, None] * (g / count),)

    out = make_output("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), adjoint)
    return out, count
