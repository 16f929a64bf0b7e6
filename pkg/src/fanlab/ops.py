"""Differentiable operations on NCHW tensors.

Every function here computes its forward result with numpy and, when a tape
is active and an input requires a gradient, records a closure computing the
input gradients.  Shapes are never broadcast implicitly except for the conv
bias.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError
from .tensor import Tensor, as_tensor, record

# Names of every differentiable op; the gradient-check suite covers exactly these.
REGISTRY: dict[str, object] = {}


def register(fn):
    REGISTRY[fn.__name__] = fn
    return fn


def _check_same_shape(op, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _norm_padding(padding) -> tuple[int, int, int, int]:
    """int -> all sides; (ph, pw) -> symmetric per axis; 4-tuple -> (top, bottom, left, right)."""
    if isinstance(padding, (int, np.integer)):
        p = (int(padding),) * 4
    elif len(padding) == 2:
        p = (int(padding[0]), int(padding[0]), int(padding[1]), int(padding[1]))
    elif len(padding) == 4:
        p = tuple(int(v) for v in padding)
    else:
        raise ConfigurationError(f"conv2d: bad padding spec {padding!r}")
    if min(p) < 0:
        raise ConfigurationError(f"conv2d: negative padding {p}")
    return p


@register
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation, im2col formulation.

    ``x``: [B, Cin, H, W], ``weight``: [Cout, Cin, kh, kw], ``bias``: [Cout] or None.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = weight.shape
    if C != Cin:
        raise ConfigurationError(f"conv2d: input has {C} channels but weight expects Cin={Cin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (Cout,):
            raise ConfigurationError(f"conv2d: bias shape {bias.shape} does not match Cout={Cout}")
    if stride < 1:
        raise ConfigurationError(f"conv2d: stride must be positive, got {stride}")
    pt, pb, pl, pr = _norm_padding(padding)
    Hp, Wp = H + pt + pb, W + pl + pr
    if kh > Hp or kw > Wp:
        raise ConfigurationError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xd = x.data
    if pt or pb or pl or pr:
        xd = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    wmat = weight.data.reshape(Cout, Cin * kh * kw)

    if kh == 1 and kw == 1:
        patches = xd[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = patches.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cin)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cin * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(B, Ho, Wo, Cin, kh, kw)
            gxp = np.zeros((B, Cin, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pt:pt + H, pl:pl + W]
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", inputs, out, backward)


@register
def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None = None,
                running_var: np.ndarray | None = None, training: bool = True,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over (B, H, W).

    In training mode the running statistics (numpy buffers) are updated in place
    with the unbiased batch variance; in eval mode they are used instead of
    batch statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4:
        raise ConfigurationError(f"batchnorm2d: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ConfigurationError(f"batchnorm2d: gamma/beta must have shape ({C},), got {gamma.shape}/{beta.shape}")
    m = B * H * W
    xd = x.data
    if training:
        if m < 2:
            raise ContractError(f"batchnorm2d: invalid batch, B*H*W={m} < 2 in train mode")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
        if running_var is not None:
            running_var *= 1 - momentum
            running_var += momentum * var * (m / (m - 1))
    else:
        if running_mean is None or running_var is None:
            raise ContractError("batchnorm2d: eval mode needs running statistics")
        mean = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gsum = g.sum(axis=(0, 2, 3))
        gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
        gg = gxhat_sum if gamma.requires_grad else None
        gbeta = gsum if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            scale = (gamma.data * invstd)[None, :, None, None]
            if training:
                gx = scale / m * (m * g - gsum[None, :, None, None] - xhat * gxhat_sum[None, :, None, None])
            else:
                gx = scale * g
        return gx, gg, gbeta

    return record("batchnorm2d", (x, gamma, beta), out, backward)


@register
def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return record("relu", (x,), out, backward)


@register
def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.  Ties go to the first element in
    row-major order within the window."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ConfigurationError(f"maxpool2x2: spatial size {H}x{W} is not even")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)  # argmax returns the first maximum
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return record("maxpool2x2", (x,), out, backward)


@register
def upsample_nearest2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (B, C, H, 2, W, 2)).reshape(B, C, 2 * H, 2 * W)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return record("upsample_nearest2x", (x,), out, backward)


@register
def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)

    def backward(g):
        return g, g

    return record("add", (a, b), a.data + b.data, backward)


@register
def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul", a, b)

    def backward(g):
        return g * b.data, g * a.data

    return record("mul", (a, b), a.data * b.data, backward)


@register
def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = x.data.dtype.type(factor)

    def backward(g):
        return (g * factor,)

    return record("scale", (x,), x.data * factor, backward)


@register
def concat_channels(*xs: Tensor) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    if not xs:
        raise ConfigurationError("concat_channels: no inputs")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ConfigurationError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return record("concat_channels", xs, out, backward)


@register
def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if np.prod(shape, dtype=np.int64) != x.size:
        raise ConfigurationError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return record("reshape", (x,), out, backward)


@register
def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum_all", (x,), np.asarray(x.data.sum(), dtype=x.dtype), backward)


@register
def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape("mse_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def backward(g):
        gp = g * (2 * diff) / n
        return gp, (-gp if target.requires_grad else None)

    return record("mse_loss", (pred, target), out, backward)
