"""Building blocks carrying the defining mechanism of each member network.

Each block is a ``Module`` so parameters pick up hierarchical names. Blocks
that sit under batch normalization run their convolutions without bias: the
normalization re-centers per channel, which makes a preceding bias both
redundant and gradient-dead.
"""

import numpy as np

from . import ops
from .errors import ConfigError
from .layers import BatchNorm2d, Conv2d, DepthwiseConv2d, Module


class ConvBN(Module):
    """Conv2d + BatchNorm2d (+ optional relu), the normalized-path unit."""

    def __init__(self, in_channels, out_channels, kernel, rng, stride=1,
                 padding=0, relu=True):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, rng, stride,
                           padding, bias=False)
        self.bn = BatchNorm2d(out_channels)
        self._relu = relu

    def forward(self, x):
        y = self.bn(self.conv(x))
        return ops.relu(y) if self._relu else y


class ConvAct(Module):
    """Conv2d with bias + relu, for the normalization-free members."""

    def __init__(self, in_channels, out_channels, kernel, rng, stride=1,
                 padding=0):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, rng, stride,
                           padding)

    def forward(self, x):
        return ops.relu(self.conv(x))


class Pool2d(Module):
    """Parameter-free pooling wrapper so pools can sit in stage lists."""

    def __init__(self, kind, size, stride):
        super().__init__()
        self.kind = kind
        self.size = size
        self.stride = stride

    def forward(self, x):
        return ops.pool2d(x, self.kind, self.size, self.stride)


class ResidualBottleneck(Module):
    """1x1 reduce, 3x3, 1x1 expand with an identity or projection skip."""

    def __init__(self, in_channels, mid, out, stride, rng):
        super().__init__()
        self.reduce = ConvBN(in_channels, mid, 1, rng)
        self.spatial = ConvBN(mid, mid, 3, rng, stride, 1)
        self.expand = ConvBN(mid, out, 1, rng, relu=False)
        # identity skip only when the block changes nothing about the shape
        if stride == 1 and in_channels == out:
            self.skip = None
        else:
            self.skip = ConvBN(in_channels, out, 1, rng, stride, relu=False)

    def forward(self, x):
        branch = self.expand(self.spatial(self.reduce(x)))
        shortcut = x if self.skip is None else self.skip(x)
        return ops.relu(ops.add(branch, shortcut))


class FireModule(Module):
    """1x1 squeeze feeding parallel 1x1 and padded 3x3 expands, concatenated.

    Either expand width may be zero (but not both), collapsing to a single
    path. Spatial dims are preserved.
    """

    def __init__(self, in_channels, squeeze, expand1, expand3, rng):
        super().__init__()
        if squeeze < 1:
            raise ConfigError(f"squeeze width must be >= 1, got {squeeze}")
        if expand1 + expand3 < 1:
            raise ConfigError("fire module needs at least one expand filter")
        self.squeeze = Conv2d(in_channels, squeeze, 1, rng)
        self.expand1 = Conv2d(squeeze, expand1, 1, rng) if expand1 else None
        self.expand3 = Conv2d(squeeze, expand3, 3, rng, 1, 1) if expand3 else None

    def forward(self, x):
        s = ops.relu(self.squeeze(x))
        parts = [e(s) for e in (self.expand1, self.expand3) if e is not None]
        out = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
        return ops.relu(out)


class DenseBlock(Module):
    """Stack of 3x3 layers where layer i consumes everything before it.

    Output carries in_channels + layers * growth channels: the raw input and
    every layer's contribution, concatenated.
    """

    def __init__(self, in_channels, layers, growth, rng):
        super().__init__()
        if layers < 1:
            raise ConfigError(f"dense block needs >= 1 layers, got {layers}")
        if growth < 1:
            raise ConfigError(f"growth must be >= 1, got {growth}")
        self.convs = [
            ConvBN(in_channels + i * growth, growth, 3, rng, 1, 1)
            for i in range(layers)
        ]

    def forward(self, x):
        feats = x
        for conv in self.convs:
            feats = ops.concat([feats, conv(feats)], axis=1)
        return feats


class Transition(Module):
    """Dense-stage compressor: 1x1 channel reduction then 2x2 avg pool."""

    def __init__(self, in_channels, out_channels, rng):
        super().__init__()
        self.conv = ConvBN(in_channels, out_channels, 1, rng)

    def forward(self, x):
        return ops.pool2d(self.conv(x), "avg", 2, 2)


class DepthwiseConv2dBN(Module):
    """Depthwise conv + BatchNorm2d, optionally relu-activated."""

    def __init__(self, channels, kernel, rng, stride=1, padding=0, relu=True):
        super().__init__()
        self.conv = DepthwiseConv2d(channels, kernel, rng, stride, padding,
                                    bias=False)
        self.bn = BatchNorm2d(channels)
        self._relu = relu

    def forward(self, x):
        y = self.bn(self.conv(x))
        return ops.relu(y) if self._relu else y


class InvertedResidual(Module):
    """Expand, depthwise 3x3, linear project; skip iff stride 1 and in == out."""

    def __init__(self, in_channels, expand_ratio, out_channels, stride, rng):
        super().__init__()
        if expand_ratio < 1:
            raise ConfigError(f"expand_ratio must be >= 1, got {expand_ratio}")
        if stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {stride}")
        mid = in_channels * expand_ratio
        self.expand = ConvBN(in_channels, mid, 1, rng)
        self.depthwise = DepthwiseConv2dBN(mid, 3, rng, stride, 1)
        self.project = ConvBN(mid, out_channels, 1, rng, relu=False)
        self._skip = stride == 1 and in_channels == out_channels

    def forward(self, x):
        y = self.project(self.depthwise(self.expand(x)))
        return ops.add(y, x) if self._skip else y


class ShuffleUnit(Module):
    """Channel-split unit ending in an inter-group channel shuffle.

    Stride 1 keeps width: one half passes through untouched, the other goes
    1x1 / depthwise 3x3 / 1x1. Stride 2 transforms both halves and may
    change width; each branch emits out_channels // 2.
    """

    def __init__(self, in_channels, out_channels, stride, rng):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {stride}")
        if out_channels % 2:
            raise ConfigError(f"out_channels must be even, got {out_channels}")
        self.stride = stride
        half = out_channels // 2
        if stride == 1:
            if in_channels != out_channels:
                raise ConfigError(
                    "stride-1 unit keeps width: "
                    f"{in_channels} != {out_channels}"
                )
            if in_channels % 2:
                raise ConfigError(f"cannot split {in_channels} channels")
            self.left = None
            right_in = in_channels // 2
        else:
            self.left = [
                DepthwiseConv2dBN(in_channels, 3, rng, stride, 1, relu=False),
                ConvBN(in_channels, half, 1, rng),
            ]
            right_in = in_channels
        self.right = [
            ConvBN(right_in, half, 1, rng),
            DepthwiseConv2dBN(half, 3, rng, stride, 1, relu=False),
            ConvBN(half, half, 1, rng),
        ]

    def forward(self, x):
        if self.stride == 1:
            split = x.shape[1] // 2
            left = ops.slice_channels(x, 0, split)
            right = ops.slice_channels(x, split, x.shape[1])
        else:
            left = right = x
            for m in self.left:
                left = m(left)
        for m in self.right:
            right = m(right)
        out = ops.concat([left, right], axis=1)
        return ops.channel_shuffle(out, 2)
