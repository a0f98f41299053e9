"""Gated axial attention and the transformer encoder/decoder blocks.

Along one axis of length ``L`` every query position ``i`` attends to the keys
in a window of ``min(span, L)`` positions centred on ``i``. Windows are
truncated at the borders; a span that covers the axis makes the pass global.
For an offset ``d = j - i`` the logits and values are::

    logit_ij = q_i.k_j / sqrt(d_k) + g_q * q_i.rq[d] + g_k * k_j.rk[d]
    y_i      = sum_j softmax_j(logit_ij) * (g_v1 * v_j + g_v2 * rv[d])
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import functional as F
from .nn import BatchNorm2d, Conv2d, Module, Parameter
from .tensor import ConfigError, ShapeError, Tensor, make_result

AXES = ("height", "width")
GATE_NAMES = ("g_q", "g_k", "g_v1", "g_v2")


@dataclass(frozen=True)
class AxialAttentionConfig:
    axis: str
    span: int
    heads: int
    channels_in: int
    channels_out: int

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES}, got {self.axis!r}")
        if self.span < 1:
            raise ConfigError(f"span must be >= 1, got {self.span}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if self.channels_out % self.heads:
            raise ConfigError(f"channels_out={self.channels_out} not divisible by heads={self.heads}")

    @property
    def d_k(self) -> int:
        return self.channels_out // self.heads

    def effective_span(self, length: int) -> int:
        return min(self.span, length)


def window_bounds(span: int, length: int) -> tuple[int, int]:
    """Offsets ``(lo, hi)`` such that keys ``i - lo .. i + hi`` are attended.

    Returns ``(length - 1, length - 1)`` when the span covers the axis.
    """
    eff = min(span, length)
    if eff >= length:
        return length - 1, length - 1
    return (eff - 1) // 2, eff // 2


def window_mask(span: int, length: int) -> np.ndarray:
    lo, hi = window_bounds(span, length)
    d = np.arange(length)[None, :] - np.arange(length)[:, None]
    return (d >= -lo) & (d <= hi)


@lru_cache(maxsize=64)
def _offset_index(length: int, span: int, table_span: int):
    """Flat indices of the attended (query, key) pairs.

    Returns ``(mask, pair, rel_q, rel_k)``: ``pair`` addresses ``(i, j)`` in an
    ``L*L`` grid, ``rel_q`` addresses ``(i, d)`` and ``rel_k`` addresses
    ``(j, d)`` in an ``L*R`` grid of offsets, ``R = 2*table_span - 1``. For a
    fixed query (or key) each offset occurs once, so scatters never collide.
    """
    mask = window_mask(span, length)
    ii, jj = np.nonzero(mask)
    off = jj - ii + table_span - 1
    if off.size and (off.min() < 0 or off.max() > 2 * table_span - 2):
        raise ConfigError(f"window offsets exceed the encoding table (span {table_span})")
    r = 2 * table_span - 1
    out = (mask, ii * length + jj, ii * r + off, jj * r + off)
    for a in out:
        a.setflags(write=False)
    return out


def axial_attention_core(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    span: int,
    rq: Optional[Tensor] = None,
    rk: Optional[Tensor] = None,
    rv: Optional[Tensor] = None,
    gates: Optional[Tensor] = None,
    return_weights: bool = False,
):
    """Windowed attention over the second-to-last axis.

    ``q`` and ``k`` are ``(B, heads, L, d_k)``; ``v`` is ``(B, heads, L, d_v)``.
    Passing no encoding tables selects the content-only path, which never
    reads positional terms. Tables are ``(heads, 2*S-1, d)`` for a table span
    ``S >= min(span, L)``.

    Positional terms are computed against every table row (``q @ rq^T``) and
    then gathered at each pair's offset.
    """
    b, h, length, dk = q.shape
    if k.shape != q.shape or v.shape[:3] != q.shape[:3]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} disagree")
    use_enc = rq is not None
    dtype = q.dtype
    scale = 1.0 / math.sqrt(dk)
    qd, kd, vd = q.data, k.data, v.data
    ll = length * length

    content_logits = (qd @ np.swapaxes(kd, -1, -2)) * scale
    if use_enc:
        r = rq.shape[1]
        mask, pair, rel_q, rel_k = _offset_index(length, span, (r + 1) // 2)
        gq, gk, g1, g2 = (gates.data[i] for i in range(4))
        qt = (qd @ np.swapaxes(rq.data, -1, -2)).reshape(b, h, length * r)
        kt = (kd @ np.swapaxes(rk.data, -1, -2)).reshape(b, h, length * r)
        qr = qt[..., rel_q]
        kr = kt[..., rel_k]
        logits = np.full((b, h, ll), -np.inf, dtype=dtype)
        logits[..., pair] = content_logits.reshape(b, h, ll)[..., pair] + gq * qr + gk * kr
        logits = logits.reshape(b, h, length, length)
    else:
        mask = window_mask(span, length)
        logits = np.where(mask, content_logits, -np.inf)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=-1, keepdims=True)

    content = w @ vd
    if use_enc:
        w_rel = np.zeros((b, h, length * r), dtype=dtype)
        w_rel[..., rel_q] = w.reshape(b, h, ll)[..., pair]
        w_rel = w_rel.reshape(b, h, length, r)
        pos = w_rel @ rv.data
        out = g1 * content + g2 * pos
    else:
        out = content

    def bw(g):
        g_content = g * g1 if use_enc else g
        dw = g_content @ np.swapaxes(vd, -1, -2)
        if use_enc:
            dw_rel = (g @ np.swapaxes(rv.data, -1, -2)).reshape(b, h, length * r)
            dw = dw.reshape(b, h, ll)
            dw[..., pair] += g2 * dw_rel[..., rel_q]
            dw = dw.reshape(b, h, length, length)
        dv = np.swapaxes(w, -1, -2) @ g_content
        dlog = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
        dq = (dlog @ kd) * scale
        dkk = (np.swapaxes(dlog, -1, -2) @ qd) * scale
        if not use_enc:
            return dq, dkk, dv
        dlog_v = dlog.reshape(b, h, ll)[..., pair]
        dqt = np.zeros((b, h, length * r), dtype=dtype)
        dqt[..., rel_q] = gq * dlog_v
        dqt = dqt.reshape(b, h, length, r)
        dkt = np.zeros((b, h, length * r), dtype=dtype)
        dkt[..., rel_k] = gk * dlog_v
        dkt = dkt.reshape(b, h, length, r)
        dq = dq + dqt @ rq.data
        dkk = dkk + dkt @ rk.data
        drq = (np.swapaxes(dqt, -1, -2) @ qd).sum(axis=0)
        drk = (np.swapaxes(dkt, -1, -2) @ kd).sum(axis=0)
        drv = g2 * (np.swapaxes(w_rel, -1, -2) @ g).sum(axis=0)
        dgates = np.array(
            [(dlog_v * qr).sum(), (dlog_v * kr).sum(), (g * content).sum(), (g * pos).sum()],
            dtype=dtype,
        )
        return dq, dkk, dv, drq, drk, drv, dgates

    inputs = (q, k, v, rq, rk, rv, gates) if use_enc else (q, k, v)
    result = make_result(out.astype(dtype, copy=False), inputs, "axial_attention", bw)
    if return_weights:
        return result, w
    return result


def gated_axial_attention_1d(
    x: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    axis: str,
    span: int,
    heads: int = 1,
    rq: Optional[Tensor] = None,
    rk: Optional[Tensor] = None,
    rv: Optional[Tensor] = None,
    gates: Optional[Tensor] = None,
) -> Tensor:
    """Multi-head gated axial attention of an NCHW map along ``axis``.

    Projections are ``(heads*d_k, C_in)`` for queries/keys and
    ``(C_out, C_in)`` for values. Without tables the positional terms are
    skipped entirely.
    """
    if span < 1:
        raise ConfigError(f"span must be >= 1, got {span}")
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {AXES}, got {axis!r}")
    n, c, hgt, wid = x.shape
    if w_q.shape[1] != c or w_k.shape[1] != c or w_v.shape[1] != c:
        raise ShapeError(f"projection input width must be {c}")
    if w_q.shape[0] % heads or w_v.shape[0] % heads:
        raise ConfigError(f"projection widths not divisible by heads={heads}")
    dk = w_q.shape[0] // heads
    cout = w_v.shape[0]
    dv = cout // heads
    if axis == "width":
        t = F.transpose(x, (0, 2, 3, 1))
        other, length = hgt, wid
    else:
        t = F.transpose(x, (0, 3, 2, 1))
        other, length = wid, hgt
    t = F.reshape(t, (n * other, length, c))

    def project(wm, d):
        p = F.matmul(t, F.transpose(wm))
        return F.transpose(F.reshape(p, (n * other, length, heads, d)), (0, 2, 1, 3))

    q, k, v = project(w_q, dk), project(w_k, dk), project(w_v, dv)
    y = axial_attention_core(q, k, v, span, rq, rk, rv, gates)
    y = F.reshape(F.transpose(y, (0, 2, 1, 3)), (n, other, length, cout))
    if axis == "width":
        return F.transpose(y, (0, 3, 1, 2))
    return F.transpose(y, (0, 3, 2, 1))


def full_self_attention_oracle(x: np.ndarray, w_q: np.ndarray, w_k: np.ndarray, w_v: np.ndarray) -> np.ndarray:
    """Dense softmax(Q K^T / sqrt(d_k)) V over ``T`` tokens, ``x`` of shape (T, C).

    Plain numpy, independent of the tape and of the windowed kernel.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or w_q.shape[1] != x.shape[1] or w_k.shape != w_q.shape or w_v.shape[1] != x.shape[1]:
        raise ShapeError(f"oracle: x {x.shape}, w_q {w_q.shape}, w_k {w_k.shape}, w_v {w_v.shape}")
    q = x @ np.asarray(w_q).T
    k = x @ np.asarray(w_k).T
    v = x @ np.asarray(w_v).T
    s = q @ k.T / math.sqrt(q.shape[1])
    s = s - s.max(axis=1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=1, keepdims=True)
    return a @ v


class GateSet(Module):
    """Four scalar gates ``(g_q, g_k, g_v1, g_v2)`` stored as one vector."""

    def __init__(self, init: float = 0.1, dtype=np.float32):
        super().__init__()
        self.gates = Parameter(np.full(4, init, dtype=dtype))

    @property
    def trainable(self) -> bool:
        return self.gates.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.gates.requires_grad = bool(value)
        if not value:
            self.gates.grad = None

    def values(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(GATE_NAMES, self.gates.data)}


class RelativePositionEncoding(Module):
    """Per-head tables indexed by offset ``-(span-1) .. span-1``."""

    def __init__(self, span: int, heads: int, d_k: int, d_v: int, rng, dtype=np.float32, bound: float = 0.1):
        super().__init__()
        self.span = span
        n = 2 * span - 1
        self.r_q = Parameter(rng.uniform(-bound, bound, (heads, n, d_k)).astype(dtype))
        self.r_k = Parameter(rng.uniform(-bound, bound, (heads, n, d_k)).astype(dtype))
        self.r_v = Parameter(rng.uniform(-bound, bound, (heads, n, d_v)).astype(dtype))

    def index(self, offset: int) -> int:
        if abs(offset) >= self.span:
            raise IndexError(f"offset {offset} outside table of span {self.span}")
        return offset + self.span - 1


class AxialAttention(Module):
    """One multi-head gated axial attention layer."""

    def __init__(self, cfg: AxialAttentionConfig, rng=None, dtype=np.float32, gate_init: float = 0.1):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        cin, cout = cfg.channels_in, cfg.channels_out
        bound = math.sqrt(3.0 / cin)
        self.w_q = Parameter(rng.uniform(-bound, bound, (cout, cin)).astype(dtype))
        self.w_k = Parameter(rng.uniform(-bound, bound, (cout, cin)).astype(dtype))
        self.w_v = Parameter(rng.uniform(-bound, bound, (cout, cin)).astype(dtype))
        self.encoding = RelativePositionEncoding(cfg.span, cfg.heads, cfg.d_k, cfg.d_k, rng, dtype)
        self.gate = GateSet(gate_init, dtype)

    def forward(self, x: Tensor) -> Tensor:
        e = self.encoding
        return gated_axial_attention_1d(
            x, self.w_q, self.w_k, self.w_v, self.cfg.axis, self.cfg.span, self.cfg.heads,
            e.r_q, e.r_k, e.r_v, self.gate.gates,
        )


def multi_head_axial_layer(x: Tensor, layer: AxialAttention) -> Tensor:
    return layer(x)


class AxialEncoderBlock(Module):
    """1x1 conv, height attention, width attention, 1x1 conv, plus residual.

    Each 1x1 conv is followed by batchnorm and ReLU. With ``stride=2`` both
    paths are 2x2 average pooled.
    """

    def __init__(self, in_ch: int, out_ch: int, span_h: int, span_w: int, heads: int,
                 stride: int = 1, rng=None, dtype=np.float32):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError(f"encoder stride must be 1 or 2, got {stride}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.conv_in = Conv2d(in_ch, out_ch, 1, bias=False, rng=rng, dtype=dtype)
        self.bn_in = BatchNorm2d(out_ch, dtype=dtype)
        self.attn_h = AxialAttention(AxialAttentionConfig("height", span_h, heads, out_ch, out_ch), rng, dtype)
        self.attn_w = AxialAttention(AxialAttentionConfig("width", span_w, heads, out_ch, out_ch), rng, dtype)
        self.conv_out = Conv2d(out_ch, out_ch, 1, bias=False, rng=rng, dtype=dtype)
        self.bn_out = BatchNorm2d(out_ch, dtype=dtype)
        self.proj = Conv2d(in_ch, out_ch, 1, rng=rng, dtype=dtype) if in_ch != out_ch else None

    def forward(self, x: Tensor) -> Tensor:
        f = F.relu(self.bn_in(self.conv_in(x)))
        f = self.attn_w(self.attn_h(f))
        if self.stride == 2:
            f = F.avg_pool2d(f, 2)
        f = F.relu(self.bn_out(self.conv_out(f)))
        r = F.avg_pool2d(x, 2) if self.stride == 2 else x
        if self.proj is not None:
            r = self.proj(r)
        return r + f

    def attention_layers(self) -> list[AxialAttention]:
        return [self.attn_h, self.attn_w]


def axial_encoder_block(x: Tensor, block: AxialEncoderBlock) -> Tensor:
    return block(x)


class DecoderBlock(Module):
    """3x3 conv, optional 2x bilinear upsampling, ReLU."""

    def __init__(self, in_ch: int, out_ch: int, upsample: bool = True, rng=None, dtype=np.float32):
        super().__init__()
        self.upsample = upsample
        self.conv = Conv2d(in_ch, out_ch, 3, padding=1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.upsample:
            y = F.bilinear_resize(y, 2 * y.shape[2], 2 * y.shape[3])
        return F.relu(y)


def decoder_block(x: Tensor, block: DecoderBlock) -> Tensor:
    return block(x)
