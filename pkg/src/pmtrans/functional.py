"""Differentiable primitives.

Every function takes and returns :class:`~pmtrans.tensor.Tensor` objects and
records its backward rule on the tape. Scalars are kept as Python floats so a
float32 graph never silently promotes to float64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, ShapeError, Tensor, as_tensor, make_result


_branch_log = threading.local()


@contextmanager
def record_branches() -> Iterator[list[int]]:
    """Collect a fingerprint of every piecewise branch taken (ReLU signs,
    loss clamps) on this thread. Two evaluations with equal fingerprints lie
    on the same smooth piece of the function."""
    prev = getattr(_branch_log, "entries", None)
    _branch_log.entries = entries = []
    try:
        yield entries
    finally:
        _branch_log.entries = prev


def _log_branch(mask: np.ndarray) -> None:
    entries = getattr(_branch_log, "entries", None)
    if entries is not None:
        entries.append(hash(np.packbits(mask).tobytes()))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        if not isinstance(a, Tensor):
            raise TypeError("add needs at least one Tensor")
        c = float(b)
        return make_result(a.data + c, (a,), "add_scalar", lambda g: (g,))
    a = as_tensor(a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data, (a, b), "add", lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if not isinstance(a, Tensor):
        return add(mul(b, -1.0), float(a))
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data, (a, b), "sub", lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data * c, (a,), "scale", lambda g: (g * c,))
    a = as_tensor(a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), "mul", bw)


def scale(x: Tensor, c: float) -> Tensor:
    return mul(x, float(c))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branch(mask)
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)
    return make_result(out, (x,), "sigmoid", lambda g: (g * out * (1 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), "softmax", bw)


# ------------------------------------------------------------------ reshaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    if not tensors:
        raise ContractError("concat of an empty sequence")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), "concat", bw)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# --------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(ad @ bd, (a, b), "matmul", bw)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding (NCHW, OIHW)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci} ({x.shape} vs {weight.shape})")
    if stride < 1:
        raise ContractError("conv2d stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    wmat = weight.data.reshape(co, -1)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = g2 @ wmat
            if kh == 1 and kw == 1 and padding == 0:
                d = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
                if stride == 1:
                    gx = np.ascontiguousarray(d)
                else:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::stride, ::stride] = d
            else:
                dcols = dcols.reshape(n, ho, wo, c, kh, kw)
                gxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, "conv2d", bw)


# -------------------------------------------------------------- normalisation


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over N, H, W.

    In training mode the running statistics are updated in place; the running
    variance uses the unbiased batch estimate.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d needs NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta {gamma.shape}/{beta.shape} vs {c} channels")
    if eps <= 0:
        raise ContractError("batchnorm2d eps must be positive")
    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m == 1:
            raise ContractError("batchnorm2d: degenerate batch (N*H*W == 1) in train mode")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(c) * (m / (m - 1))

        def bw(g):
            gg = gb_ = gx = None
            if gamma.requires_grad:
                gg = (g * xhat).sum(axis=(0, 2, 3))
            if beta.requires_grad:
                gb_ = g.sum(axis=(0, 2, 3))
            if x.requires_grad:
                dxhat = g * gd
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv / m) * (m * dxhat - s1 - xhat * s2)
            return gx, gg, gb_

    else:
        inv = 1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv

        def bw(g):
            gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gb_ = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            gx = g * gd * inv if x.requires_grad else None
            return gx, gg, gb_

    out = (gd * xhat + bd).astype(x.dtype, copy=False)
    return make_result(out, (x, gamma, beta), "batchnorm2d", bw)


# ------------------------------------------------------------------ resampling


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic (n_out, n_in) linear-interpolation matrix, align-corners."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1
        return a
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - i0
    rows = np.arange(n_out)
    a[rows, i0] = 1 - frac
    a[rows, i0 + 1] += frac
    return a


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an NCHW tensor with align-corners semantics."""
    if out_h < 1 or out_w < 1:
        raise ContractError(f"bilinear_resize target must be positive, got {out_h}x{out_w}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize needs NCHW input, got {x.shape}")
    ah = interpolation_matrix(x.shape[2], out_h, x.dtype)
    aw = interpolation_matrix(x.shape[3], out_w, x.dtype)
    out = ah @ x.data @ aw.T
    return make_result(out, (x,), "bilinear_resize", lambda g: (ah.T @ g @ aw,))


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    inv = 1.0 / (k * k)

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) * inv,)

    return make_result(out, (x,), "avg_pool2d", bw)


# ---------------------------------------------------------------------- losses


def binary_cross_entropy(
    pred: Tensor, target, eps: float = 1e-7, reduction: str = "sum"
) -> Tensor:
    """BCE of probabilities against a binary target, clamped to [eps, 1-eps]."""
    z = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != z.shape:
        raise ShapeError(f"bce: prediction {pred.shape} vs target {z.shape}")
    p = pred.data
    pc = np.clip(p, eps, 1 - eps)
    terms = -(z * np.log(pc) + (1 - z) * np.log(1 - pc))
    if reduction == "sum":
        k = 1.0
    elif reduction == "mean":
        k = 1.0 / p.size
    else:
        raise ContractError(f"unknown reduction {reduction!r}")
    out = np.asarray(terms.sum() * k, dtype=p.dtype)
    inside = (p >= eps) & (p <= 1 - eps)
    _log_branch(inside)

    def bw(g):
        d = (-z / pc + (1 - z) / (1 - pc)) * inside
        return ((d * (float(g) * k)).astype(p.dtype),)

    return make_result(out, (pred,), "bce", bw)


def binary_cross_entropy_with_logits(
    logits: Tensor, target, eps: float = 1e-7, reduction: str = "sum"
) -> Tensor:
    """``binary_cross_entropy(sigmoid(logits), target, eps)`` in a stable form.

    Clamping probabilities to [eps, 1-eps] is the same as clamping logits to
    [-b, b] with b = log((1-eps)/eps); the loss is then evaluated as
    softplus(s) - z*s, which avoids forming 1 - sigmoid(s) for large s.
    """
    z = target.data if isinstance(target, Tensor) else np.asarray(target)
    if logits.shape != z.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs target {z.shape}")
    if reduction == "sum":
        k = 1.0
    elif reduction == "mean":
        k = 1.0 / logits.size
    else:
        raise ContractError(f"unknown reduction {reduction!r}")
    s = logits.data
    bound = float(np.log1p(-eps) - np.log(eps))
    sc = np.clip(s, -bound, bound)
    terms = np.maximum(sc, 0) - z * sc + np.log1p(np.exp(-np.abs(sc)))
    out = np.asarray(terms.sum() * k, dtype=s.dtype)
    inside = (s >= -bound) & (s <= bound)
    _log_branch(inside)

    def bw(g):
        p = 0.5 * (1 + np.tanh(0.5 * sc))  # sigmoid without overflow
        return (((p - z) * inside * (float(g) * k)).astype(s.dtype),)

    return make_result(out, (logits,), "bce_logits", bw)

