"""Residual block builders and whole-network assembly.

Every ``build_*`` function appends nodes to a :class:`GraphBuilder`,
starting from the node named ``x``, and returns the name of the block's
output node.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from res3d.errors import ConfigurationError
from res3d.layers import (
    Add, AvgPool3d, BatchNorm3d, Concat, Conv3d, GlobalAvgPool, Linear, MaxPool3d, ReLU,
)
from res3d.network import INPUT, GraphBuilder, Network

GENRES = ("resnet-basic", "resnet-bottleneck", "preact", "wide", "resnext", "densenet")

# genre -> fields that must be set (and are forbidden elsewhere)
_GENRE_FIELDS = {
    "wide": ("widen_factor",),
    "resnext": ("cardinality",),
    "densenet": ("growth_rate", "compression"),
}
_OPTIONAL_FIELDS = ("widen_factor", "cardinality", "growth_rate", "compression")


@dataclass(frozen=True)
class ArchitectureSpec:
    genre: str
    name: str
    stage_depths: tuple
    base_width: int = 64
    widen_factor: float | None = None
    cardinality: int | None = None
    growth_rate: int | None = None
    compression: float | None = None
    num_classes: int = 125
    clip_shape: tuple = (3, 16, 112, 112)
    stem_width: int = 64

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "clip_shape", tuple(int(d) for d in self.clip_shape))
        self.validate()

    def validate(self):
        if self.genre not in GENRES:
            raise ConfigurationError(f"unknown genre {self.genre!r}; expected one of {GENRES}")
        if not self.name:
            raise ConfigurationError("architecture name must be non-empty")
        if len(self.stage_depths) != 4 or min(self.stage_depths) < 1:
            raise ConfigurationError(f"stage_depths must be 4 positive integers, got {self.stage_depths}")
        if self.base_width < 1 or self.stem_width < 1:
            raise ConfigurationError("base_width and stem_width must be positive")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.clip_shape) != 4 or min(self.clip_shape) < 1:
            raise ConfigurationError(f"clip_shape must be (C, T, H, W), got {self.clip_shape}")
        required = _GENRE_FIELDS.get(self.genre, ())
        for f in _OPTIONAL_FIELDS:
            value = getattr(self, f)
            if f in required and value is None:
                raise ConfigurationError(f"genre {self.genre!r} requires field {f!r}")
            if f not in required and value is not None:
                raise ConfigurationError(f"field {f!r} is not used by genre {self.genre!r}")
        if self.widen_factor is not None and self.widen_factor <= 0:
            raise ConfigurationError("widen_factor must be positive")
        if self.cardinality is not None and self.cardinality < 1:
            raise ConfigurationError("cardinality must be positive")
        if self.growth_rate is not None and self.growth_rate < 1:
            raise ConfigurationError("growth_rate must be positive")
        if self.compression is not None and not 0 < self.compression <= 1:
            raise ConfigurationError("compression must lie in (0, 1]")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


_NAMED = {
    "resnet-18": dict(genre="resnet-basic", stage_depths=(2, 2, 2, 2)),
    "resnet-34": dict(genre="resnet-basic", stage_depths=(3, 4, 6, 3)),
    "resnet-50": dict(genre="resnet-bottleneck", stage_depths=(3, 4, 6, 3)),
    "resnet-101": dict(genre="resnet-bottleneck", stage_depths=(3, 4, 23, 3)),
    "resnet-152": dict(genre="resnet-bottleneck", stage_depths=(3, 8, 36, 3)),
    "preact-resnet-200": dict(genre="preact", stage_depths=(3, 24, 36, 3)),
    "wideresnet-50": dict(genre="wide", stage_depths=(3, 4, 6, 3), widen_factor=2),
    "resnext-101": dict(genre="resnext", stage_depths=(3, 4, 23, 3), cardinality=32,
                        base_width=128),
    "densenet-121": dict(genre="densenet", stage_depths=(6, 12, 24, 16), growth_rate=32,
                         compression=0.5),
    "densenet-201": dict(genre="densenet", stage_depths=(6, 12, 48, 32), growth_rate=32,
                         compression=0.5),
    # test-only scale model, not one of the published configurations
    "miniature": dict(genre="resnet-basic", stage_depths=(1, 1, 1, 1), base_width=8,
                      stem_width=8, clip_shape=(3, 8, 32, 32)),
}

NAMED_ARCHITECTURES = tuple(n for n in _NAMED if n != "miniature")


def named_spec(name, **overrides):
    """Return the canonical spec for ``name`` with optional field overrides."""
    key = name.lower()
    if key not in _NAMED:
        raise ConfigurationError(f"unknown architecture {name!r}; known: {sorted(_NAMED)}")
    fields = dict(_NAMED[key], name=key)
    fields.update(overrides)
    return ArchitectureSpec(**fields)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def _check_stride(stride):
    if stride not in (1, 2):
        raise ConfigurationError(f"block stride must be 1 or 2, got {stride}")


def _conv_bn(g, x, name, in_ch, out_ch, kernel, stride, rng, dtype, groups=1, relu=True):
    pad = kernel // 2
    y = g.add(f"{name}.conv", Conv3d(in_ch, out_ch, kernel, stride, pad, groups, rng=rng, dtype=dtype), x)
    y = g.add(f"{name}.bn", BatchNorm3d(out_ch, dtype=dtype), y)
    if relu:
        y = g.add(f"{name}.relu", ReLU(), y)
    return y


def _shortcut(g, x, name, in_ch, out_ch, stride, rng, dtype):
    if in_ch == out_ch and stride == 1:
        return x
    return _conv_bn(g, x, f"{name}.downsample", in_ch, out_ch, 1, stride, rng, dtype, relu=False)


def build_basic_block(g, x, in_ch, out_ch, stride, *, name, rng, dtype=np.float32):
    """conv3 -> BN -> ReLU -> conv3 -> BN, shortcut added, then ReLU."""
    _check_stride(stride)
    y = _conv_bn(g, x, f"{name}.1", in_ch, out_ch, 3, stride, rng, dtype)
    y = _conv_bn(g, y, f"{name}.2", out_ch, out_ch, 3, 1, rng, dtype, relu=False)
    s = _shortcut(g, x, name, in_ch, out_ch, stride, rng, dtype)
    y = g.add(f"{name}.add", Add(), y, s)
    return g.add(f"{name}.relu", ReLU(), y)


def _check_bottleneck(mid_ch, out_ch, groups):
    if mid_ch < 1 or out_ch < 1 or out_ch % mid_ch:
        raise ConfigurationError(
            f"bottleneck output channels ({out_ch}) must be a multiple of mid channels ({mid_ch})"
        )
    if groups < 1 or mid_ch % groups:
        raise ConfigurationError(f"mid channels ({mid_ch}) not divisible by groups={groups}")


def build_bottleneck_block(g, x, in_ch, mid_ch, out_ch, stride, groups=1, *, name, rng,
                           dtype=np.float32):
    """1x1x1 reduce -> 3x3x3 (strided, optionally grouped) -> 1x1x1 expand."""
    _check_stride(stride)
    _check_bottleneck(mid_ch, out_ch, groups)
    y = _conv_bn(g, x, f"{name}.1", in_ch, mid_ch, 1, 1, rng, dtype)
    y = _conv_bn(g, y, f"{name}.2", mid_ch, mid_ch, 3, stride, rng, dtype, groups=groups)
    y = _conv_bn(g, y, f"{name}.3", mid_ch, out_ch, 1, 1, rng, dtype, relu=False)
    s = _shortcut(g, x, name, in_ch, out_ch, stride, rng, dtype)
    y = g.add(f"{name}.add", Add(), y, s)
    return g.add(f"{name}.relu", ReLU(), y)


def build_preact_block(g, x, in_ch, mid_ch, out_ch, stride, *, name, rng, dtype=np.float32):
    """(BN -> ReLU -> conv) x 3 with the shortcut joining after the last conv."""
    _check_stride(stride)
    _check_bottleneck(mid_ch, out_ch, 1)
    y = x
    layout = [(in_ch, mid_ch, 1, 1), (mid_ch, mid_ch, 3, stride), (mid_ch, out_ch, 1, 1)]
    for i, (ci, co, k, s) in enumerate(layout, start=1):
        y = g.add(f"{name}.{i}.bn", BatchNorm3d(ci, dtype=dtype), y)
        y = g.add(f"{name}.{i}.relu", ReLU(), y)
        y = g.add(f"{name}.{i}.conv", Conv3d(ci, co, k, s, k // 2, rng=rng, dtype=dtype), y)
    sc = _shortcut(g, x, name, in_ch, out_ch, stride, rng, dtype)
    return g.add(f"{name}.add", Add(), y, sc)


def build_dense_block(g, x, in_ch, num_layers, growth_rate, *, name, rng, dtype=np.float32):
    """Returns ``(output node, output channels)``."""
    if num_layers < 1:
        raise ConfigurationError("dense block needs at least one layer")
    if growth_rate < 1:
        raise ConfigurationError(f"growth rate must be positive, got {growth_rate}")
    ch = in_ch
    for i in range(1, num_layers + 1):
        p = f"{name}.{i}"
        y = g.add(f"{p}.1.bn", BatchNorm3d(ch, dtype=dtype), x)
        y = g.add(f"{p}.1.relu", ReLU(), y)
        y = g.add(f"{p}.1.conv", Conv3d(ch, 4 * growth_rate, 1, rng=rng, dtype=dtype), y)
        y = g.add(f"{p}.2.bn", BatchNorm3d(4 * growth_rate, dtype=dtype), y)
        y = g.add(f"{p}.2.relu", ReLU(), y)
        y = g.add(f"{p}.2.conv", Conv3d(4 * growth_rate, growth_rate, 3, 1, 1, rng=rng, dtype=dtype), y)
        x = g.add(f"{p}.concat", Concat(), x, y)
        ch += growth_rate
    return x, ch


def transition_channels(in_ch, compression):
    return int(Fraction(compression).limit_denominator(1 << 20) * in_ch)


def build_transition(g, x, in_ch, compression, *, name, rng, dtype=np.float32):
    """BN -> ReLU -> 1x1x1 conv (compress) -> 2x2x2 average pool. Returns (node, channels)."""
    if not 0 < compression <= 1:
        raise ConfigurationError("compression must lie in (0, 1]")
    out_ch = transition_channels(in_ch, compression)
    if out_ch < 1:
        raise ConfigurationError(f"compression {compression} leaves no channels from {in_ch}")
    y = g.add(f"{name}.bn", BatchNorm3d(in_ch, dtype=dtype), x)
    y = g.add(f"{name}.relu", ReLU(), y)
    y = g.add(f"{name}.conv", Conv3d(in_ch, out_ch, 1, rng=rng, dtype=dtype), y)
    return g.add(f"{name}.pool", AvgPool3d(2, 2), y), out_ch


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


def stage_channels(spec):
    """(mid, out) channel pairs per stage for the residual genres."""
    pairs = []
    for i in range(4):
        w = spec.base_width * 2 ** i
        if spec.genre == "resnet-basic":
            pairs.append((w, w))
        elif spec.genre in ("resnet-bottleneck", "preact"):
            pairs.append((w, 4 * w))
        elif spec.genre == "wide":
            pairs.append((int(round(w * spec.widen_factor)), 4 * w))
        elif spec.genre == "resnext":
            pairs.append((w, 2 * w))
        else:
            raise ConfigurationError(f"genre {spec.genre!r} has no residual stages")
    return pairs


def assemble_network(spec, seed=0, dtype=np.float32):
    """Build the full network described by ``spec``.

    Weights are drawn from one generator seeded with ``seed`` in build
    order, so equal (spec, seed) pairs give identical parameters.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    g = GraphBuilder()
    c_in = spec.clip_shape[0]

    x = g.add("stem.conv", Conv3d(c_in, spec.stem_width, 7, (1, 2, 2), 3, rng=rng, dtype=dtype), INPUT)
    x = g.add("stem.bn", BatchNorm3d(spec.stem_width, dtype=dtype), x)
    x = g.add("stem.relu", ReLU(), x)
    x = g.add("stem.pool", MaxPool3d(3, 2, 1), x)
    ch = spec.stem_width

    if spec.genre == "densenet":
        for s, depth in enumerate(spec.stage_depths, start=1):
            if s > 1:
                x, ch = build_transition(g, x, ch, spec.compression, name=f"trans{s - 1}",
                                         rng=rng, dtype=dtype)
            x, ch = build_dense_block(g, x, ch, depth, spec.growth_rate, name=f"dense{s}",
                                      rng=rng, dtype=dtype)
    else:
        for s, (depth, (mid, out)) in enumerate(zip(spec.stage_depths, stage_channels(spec)), start=1):
            for b in range(depth):
                stride = 2 if (s > 1 and b == 0) else 1
                name = f"layer{s}.{b}"
                if spec.genre == "resnet-basic":
                    x = build_basic_block(g, x, ch, out, stride, name=name, rng=rng, dtype=dtype)
                elif spec.genre == "preact":
                    x = build_preact_block(g, x, ch, mid, out, stride, name=name, rng=rng, dtype=dtype)
                else:
                    groups = spec.cardinality if spec.genre == "resnext" else 1
                    x = build_bottleneck_block(g, x, ch, mid, out, stride, groups, name=name,
                                               rng=rng, dtype=dtype)
                ch = out

    if spec.genre in ("preact", "densenet"):
        x = g.add("final.bn", BatchNorm3d(ch, dtype=dtype), x)
        x = g.add("final.relu", ReLU(), x)
    x = g.add("pool", GlobalAvgPool(), x)
    # zero classifier: an untrained network predicts the uniform distribution
    x = g.add("fc", Linear(ch, spec.num_classes, dtype=dtype, zero_init=True), x)
    net = g.build(x, spec=spec, input_shape=spec.clip_shape)
    # fail early on clips too small for the downsampling schedule
    net.shapes((1,) + spec.clip_shape)
    return net


def feature_channels(net):
    """Channels entering the classifier."""
    return net.node("fc").layer.in_features
