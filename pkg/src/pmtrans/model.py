"""The four-branch pyramid network: three axial-transformer branches at full,
half and quarter resolution, a residual CNN branch, attention-gate fusion at
each scale and deep-supervision heads."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import functional as F
from .attention import AxialEncoderBlock, DecoderBlock, GateSet
from .nn import Conv2d, ConvBNReLU, Module, ModuleList
from .tensor import ConfigError, ShapeError, Tensor

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class BranchSpec:
    name: str
    scale: int  # input is downsampled by this factor
    depth: int
    span_divisor: int = 4

    def span(self, extent: int) -> int:
        # span is extent/divisor of the original image, counted in branch pixels
        return max(1, extent // self.span_divisor)


DEFAULT_BRANCHES = (
    BranchSpec("short", 1, 5),
    BranchSpec("mid", 2, 4),
    BranchSpec("long", 4, 3),
)


@dataclass
class PMTransConfig:
    height: int = 64
    width: int = 64
    in_channels: int = 1
    base_channels: int = 16
    heads: int = 4
    branches: tuple[BranchSpec, ...] = DEFAULT_BRANCHES
    cnn_stages: int = 3
    ds_weights: tuple[float, float, float] = (1.0, 0.5, 0.25)
    gate_with_cnn: bool = False
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.branches = tuple(self.branches)
        self.ds_weights = tuple(float(w) for w in self.ds_weights)
        self.validate()

    def validate(self) -> None:
        if self.height % 16 or self.width % 16:
            raise ConfigError(f"height and width must be divisible by 16, got {self.height}x{self.width}")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.heads < 1 or self.base_channels % self.heads:
            raise ConfigError(f"base_channels={self.base_channels} not divisible by heads={self.heads}")
        if self.cnn_stages != 3:
            raise ConfigError("the CNN branch has exactly three stages (scales 1, 1/2, 1/4)")
        if sorted(b.scale for b in self.branches) != [1, 2, 4]:
            raise ConfigError("branches must cover scales 1, 2 and 4")
        for b in self.branches:
            if b.depth < 2:
                raise ConfigError(f"branch {b.name}: depth must be >= 2 (two downsampling blocks)")
        if len(self.ds_weights) != 3 or any(w < 0 for w in self.ds_weights):
            raise ConfigError("ds_weights must be three non-negative numbers")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def branch(self, scale: int) -> BranchSpec:
        return next(b for b in self.branches if b.scale == scale)

    def to_text(self) -> str:
        lines = []
        for f_ in fields(self):
            v = getattr(self, f_.name)
            if f_.name == "branches":
                for b in v:
                    lines.append(f"depth_{b.name}={b.depth}")
                    lines.append(f"span_divisor_{b.name}={b.span_divisor}")
            elif isinstance(v, tuple):
                lines.append(f"{f_.name}={','.join(repr(x) for x in v)}")
            else:
                lines.append(f"{f_.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PMTransConfig":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        branches = []
        for b in DEFAULT_BRANCHES:
            branches.append(BranchSpec(
                b.name, b.scale,
                int(kv.pop(f"depth_{b.name}", b.depth)),
                int(kv.pop(f"span_divisor_{b.name}", b.span_divisor)),
            ))
        return cls(
            height=int(kv["height"]), width=int(kv["width"]),
            in_channels=int(kv["in_channels"]), base_channels=int(kv["base_channels"]),
            heads=int(kv["heads"]), branches=tuple(branches), cnn_stages=int(kv["cnn_stages"]),
            ds_weights=tuple(float(x) for x in kv["ds_weights"].split(",")),
            gate_with_cnn=kv["gate_with_cnn"] == "True", seed=int(kv["seed"]), dtype=kv["dtype"],
        )


def branch_plan(spec: BranchSpec, cfg: PMTransConfig):
    """Resolutions and widths of the stem output and each encoder block.

    Returns ``(resolutions, channels)`` where index 0 is the stem output.
    """
    h, w = cfg.height // spec.scale, cfg.width // spec.scale
    res = [(h, w)]
    ch = [cfg.base_channels]
    for k in range(spec.depth):
        if k < 2:
            h, w = h // 2, w // 2
        res.append((h, w))
        ch.append(cfg.base_channels * 2 ** min(k + 1, 2))
    return res, ch


class TransformerBranch(Module):
    """Conv stem, ``depth`` axial encoder blocks, ``depth`` decoder blocks.

    The first two encoder blocks halve the resolution and double the width;
    decoder block ``k`` returns to the shape of encoder output ``depth-k`` and
    is summed with it.
    """

    def __init__(self, spec: BranchSpec, cfg: PMTransConfig, rng):
        super().__init__()
        dt = cfg.np_dtype
        c0 = cfg.base_channels
        self.spec = spec
        self.stem = ModuleList([
            ConvBNReLU(cfg.in_channels, c0, 3, rng=rng, dtype=dt),
            ConvBNReLU(c0, c0, 3, rng=rng, dtype=dt),
            ConvBNReLU(c0, c0, 3, rng=rng, dtype=dt),
        ])
        span_h, span_w = spec.span(cfg.height), spec.span(cfg.width)
        self.res, self.ch = branch_plan(spec, cfg)
        self.encoders = ModuleList([
            AxialEncoderBlock(self.ch[k], self.ch[k + 1], span_h, span_w, cfg.heads,
                              stride=2 if k < 2 else 1, rng=rng, dtype=dt)
            for k in range(spec.depth)
        ])
        d = spec.depth
        self.decoders = ModuleList()
        self.skip_shapes = []
        for k in range(1, d + 1):
            src, dst = d - k + 1, d - k
            up = self.res[dst] != self.res[src]
            size = (self.res[src][0] * (2 if up else 1), self.res[src][1] * (2 if up else 1))
            if size != self.res[dst]:
                raise ShapeError(f"{spec.name}: decoder {k} yields {size}, skip is {self.res[dst]}")
            self.skip_shapes.append(((self.ch[dst],) + size, (self.ch[dst],) + self.res[dst]))
            self.decoders.append(DecoderBlock(self.ch[src], self.ch[dst], upsample=up, rng=rng, dtype=dt))

    def forward(self, x: Tensor) -> Tensor:
        expect = (self.res[0][0], self.res[0][1])
        if x.shape[2:] != expect:
            raise ShapeError(f"{self.spec.name} branch expects {expect}, got {x.shape[2:]}")
        h = x
        for layer in self.stem:
            h = layer(h)
        outs = [h]
        for enc in self.encoders:
            outs.append(enc(outs[-1]))
        h = outs[-1]
        d = self.spec.depth
        for k, dec in enumerate(self.decoders, start=1):
            h = dec(h) + outs[d - k]
        return h

    def gate_sets(self) -> list[GateSet]:
        return [layer.gate for enc in self.encoders for layer in enc.attention_layers()]


class ResidualBlock(Module):
    def __init__(self, in_ch, out_ch, stride=1, rng=None, dtype=np.float32):
        super().__init__()
        self.conv1 = ConvBNReLU(in_ch, out_ch, 3, stride=stride, rng=rng, dtype=dtype)
        self.conv2 = ConvBNReLU(out_ch, out_ch, 3, rng=rng, dtype=dtype, relu=False)
        self.proj = (
            Conv2d(in_ch, out_ch, 1, stride=stride, rng=rng, dtype=dtype)
            if stride != 1 or in_ch != out_ch else None
        )

    def forward(self, x: Tensor) -> Tensor:
        r = self.proj(x) if self.proj is not None else x
        return r + self.conv2(self.conv1(x))


class CNNBranch(Module):
    """Three residual stages at scales 1, 1/2 and 1/4."""

    def __init__(self, cfg: PMTransConfig, rng):
        super().__init__()
        c0, dt = cfg.base_channels, cfg.np_dtype
        self.stages = ModuleList([
            ResidualBlock(cfg.in_channels, c0, 1, rng, dt),
            ResidualBlock(c0, 2 * c0, 2, rng, dt),
            ResidualBlock(2 * c0, 4 * c0, 2, rng, dt),
        ])

    def forward(self, x: Tensor) -> list[Tensor]:
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps


class AttentionGate(Module):
    """Additive attention gate: alpha = sigmoid(psi(relu(W_g g + W_x x))).

    Output is a 1x1 conv of ``concat(g, x * alpha)``.
    """

    def __init__(self, g_ch, x_ch, inter_ch, out_ch, rng=None, dtype=np.float32):
        super().__init__()
        self.w_g = Conv2d(g_ch, inter_ch, 1, rng=rng, dtype=dtype)
        self.w_x = Conv2d(x_ch, inter_ch, 1, bias=False, rng=rng, dtype=dtype)
        self.psi = Conv2d(inter_ch, 1, 1, rng=rng, dtype=dtype)
        self.fuse = Conv2d(g_ch + x_ch, out_ch, 1, rng=rng, dtype=dtype)

    def alpha(self, g: Tensor, x: Tensor) -> Tensor:
        if g.shape[0] != x.shape[0] or g.shape[2:] != x.shape[2:]:
            raise ShapeError(f"attention gate: gating {g.shape} vs features {x.shape}")
        return F.sigmoid(self.psi(F.relu(self.w_g(g) + self.w_x(x))))

    def forward(self, g: Tensor, x: Tensor) -> Tensor:
        a = self.alpha(g, x)
        return self.fuse(F.concat([g, x * a], axis=1))


class PMTrans(Module):
    def __init__(self, cfg: PMTransConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c0, dt = cfg.base_channels, cfg.np_dtype
        self.short = TransformerBranch(cfg.branch(1), cfg, rng)
        self.mid = TransformerBranch(cfg.branch(2), cfg, rng)
        self.long = TransformerBranch(cfg.branch(4), cfg, rng)
        self.cnn = CNNBranch(cfg, rng)
        cnn_ch = (c0, 2 * c0, 4 * c0)
        self.gates = ModuleList()
        for cc in cnn_ch:
            g_ch, x_ch = (cc, c0) if cfg.gate_with_cnn else (c0, cc)
            self.gates.append(AttentionGate(g_ch, x_ch, c0, c0, rng, dt))
        self.head_quarter = Conv2d(c0, 1, 1, rng=rng, dtype=dt)
        self.merge_half = Conv2d(c0, c0, 1, rng=rng, dtype=dt)
        self.head_half = Conv2d(c0, 1, 1, rng=rng, dtype=dt)
        self.merge_full = Conv2d(c0, c0, 1, rng=rng, dtype=dt)
        self.head_full = Conv2d(c0, 1, 1, rng=rng, dtype=dt)

    @property
    def branches(self) -> list[TransformerBranch]:
        return [self.short, self.mid, self.long]

    def gate_sets(self) -> list[GateSet]:
        return [g for b in self.branches for g in b.gate_sets()]

    def set_gates_trainable(self, flag: bool) -> None:
        for g in self.gate_sets():
            g.trainable = flag

    def fuse(self, i: int, t: Tensor, c: Tensor) -> Tensor:
        gate = self.gates[i]
        return gate(c, t) if self.cfg.gate_with_cnn else gate(t, c)

    def forward(self, x: Tensor) -> dict[str, Tensor]:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ShapeError(f"model expects (N, {cfg.in_channels}, {cfg.height}, {cfg.width}), got {x.shape}")
        h, w = cfg.height, cfg.width
        x2 = F.bilinear_resize(x, h // 2, w // 2)
        x4 = F.bilinear_resize(x, h // 4, w // 4)
        t1, t2, t4 = self.short(x), self.mid(x2), self.long(x4)
        c1, c2, c4 = self.cnn(x)
        f1, f2, f4 = self.fuse(0, t1, c1), self.fuse(1, t2, c2), self.fuse(2, t4, c4)

        out = {}
        if self.training:
            out["logits_quarter"] = self.head_quarter(f4)
        m2 = f2 + self.merge_half(F.bilinear_resize(f4, h // 2, w // 2))
        if self.training:
            out["logits_half"] = self.head_half(m2)
        m1 = f1 + self.merge_full(F.bilinear_resize(m2, h, w))
        out["logits_full"] = self.head_full(m1)
        return out

    def branch_outputs(self, x: Tensor) -> dict[str, Tensor]:
        h, w = self.cfg.height, self.cfg.width
        return {
            "short": self.short(x),
            "mid": self.mid(F.bilinear_resize(x, h // 2, w // 2)),
            "long": self.long(F.bilinear_resize(x, h // 4, w // 4)),
        }


def build_pmtrans(cfg: PMTransConfig) -> PMTrans:
    return PMTrans(cfg)


def pmtrans_forward(model: PMTrans, x: Tensor) -> dict[str, Tensor]:
    return model(x)


def transformer_branch_forward(branch: TransformerBranch, x_scaled: Tensor) -> Tensor:
    return branch(x_scaled)


def cnn_branch_forward(branch: CNNBranch, x: Tensor) -> list[Tensor]:
    return branch(x)


def attention_gate_fuse(gate: AttentionGate, transformer_map: Tensor, cnn_map: Tensor) -> Tensor:
    return gate(transformer_map, cnn_map)
