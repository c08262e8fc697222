"""Six micro-scale member networks and their input/output adaptation.

Every member follows the same skeleton: a 3x3 stride-2 stem, stages built
from the member's defining block, global average pooling, and a linear
projection to ``feature_dim``. What differs between kinds is only the block
in the middle, which is the point: at this scale the architectures are not
replicas, they are carriers of one mechanism each.

Widths derive from per-kind reference widths that double per stage, scaled
by ``width_scale`` and floored so tiny scales stay buildable. The default
scale of 0.25 puts every kind in the tens-of-thousands of parameters, small
enough to train on a CPU in minutes.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import ops
from .blocks import (
    ConvAct,
    ConvBN,
    DenseBlock,
    FireModule,
    InvertedResidual,
    Pool2d,
    ResidualBottleneck,
    ShuffleUnit,
    Transition,
)
from .errors import ConfigError
from .layers import Conv2d, Linear, Module

KINDS = ("resnet", "squeezenet", "densenet", "vgg", "mobilenet", "shufflenet")

# reference width of the first stage per kind; stage i uses base * 2**i
_BASE_WIDTH = {
    "resnet": 64,
    "squeezenet": 96,
    "densenet": 64,
    "vgg": 64,
    "mobilenet": 64,
    "shufflenet": 128,
}
_DENSE_GROWTH = 48
_MOBILE_EXPAND = 2


def scaled_width(base, width_scale):
    """Half-up rounding with a floor of 4 channels."""
    return max(4, int(base * width_scale + 0.5))


def scaled_even_width(base, width_scale):
    """Like scaled_width but even, for blocks that split channels in half."""
    return max(8, 2 * int(base * width_scale / 2 + 0.5))


@dataclass(frozen=True)
class MicroModelSpec:
    kind: str
    in_channels: int = 8
    width_scale: float = 0.25
    depth: tuple = (2, 2)
    feature_dim: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(
                f"unknown model kind '{self.kind}', expected one of {KINDS}"
            )
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if not self.width_scale > 0:
            raise ConfigError(f"width_scale must be > 0, got {self.width_scale}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        depth = tuple(int(d) for d in self.depth)
        if not depth or any(d < 1 for d in depth):
            raise ConfigError(f"depth needs positive stage counts, got {self.depth}")
        object.__setattr__(self, "depth", depth)

    def stage_widths(self):
        scale = scaled_even_width if self.kind == "shufflenet" else scaled_width
        base = _BASE_WIDTH[self.kind]
        return [scale(base * 2 ** i, self.width_scale) for i in range(len(self.depth))]


def _build_resnet(spec, rng):
    widths = spec.stage_widths()
    stem = ConvBN(spec.in_channels, widths[0], 3, rng, 2, 1)
    stages, c = [], widths[0]
    for si, (blocks, w) in enumerate(zip(spec.depth, widths)):
        for bi in range(blocks):
            stride = 2 if si > 0 and bi == 0 else 1
            stages.append(ResidualBottleneck(c, max(4, w // 2), w, stride, rng))
            c = w
    return stem, stages, c


def _build_squeezenet(spec, rng):
    widths = spec.stage_widths()
    stem = ConvAct(spec.in_channels, widths[0], 3, rng, 2, 1)
    stages, c = [], widths[0]
    for si, (blocks, w) in enumerate(zip(spec.depth, widths)):
        if si > 0:
            stages.append(Pool2d("max", 2, 2))
        for _ in range(blocks):
            stages.append(FireModule(c, max(4, w // 4), w // 2, w - w // 2, rng))
            c = w
    return stem, stages, c


def _build_densenet(spec, rng):
    growth = scaled_width(_DENSE_GROWTH, spec.width_scale)
    stem_w = scaled_width(_BASE_WIDTH["densenet"], spec.width_scale)
    stem = ConvBN(spec.in_channels, stem_w, 3, rng, 2, 1)
    stages, c = [], stem_w
    for si, blocks in enumerate(spec.depth):
        stages.append(DenseBlock(c, blocks, growth, rng))
        c += blocks * growth
        if si < len(spec.depth) - 1:
            out = max(4, c // 2)
            stages.append(Transition(c, out, rng))
            c = out
    return stem, stages, c


def _build_vgg(spec, rng):
    widths = spec.stage_widths()
    stem = ConvAct(spec.in_channels, widths[0], 3, rng, 2, 1)
    stages, c = [], widths[0]
    for si, (blocks, w) in enumerate(zip(spec.depth, widths)):
        if si > 0:
            stages.append(Pool2d("max", 2, 2))
        for _ in range(blocks):
            stages.append(ConvAct(c, w, 3, rng, 1, 1))
            c = w
    return stem, stages, c


def _build_mobilenet(spec, rng):
    widths = spec.stage_widths()
    stem = ConvBN(spec.in_channels, widths[0], 3, rng, 2, 1)
    stages, c = [], widths[0]
    for si, (blocks, w) in enumerate(zip(spec.depth, widths)):
        for bi in range(blocks):
            stride = 2 if si > 0 and bi == 0 else 1
            stages.append(InvertedResidual(c, _MOBILE_EXPAND, w, stride, rng))
            c = w
    return stem, stages, c


def _build_shufflenet(spec, rng):
    widths = spec.stage_widths()
    stem = ConvBN(spec.in_channels, widths[0], 3, rng, 2, 1)
    stages, c = [], widths[0]
    for si, (blocks, w) in enumerate(zip(spec.depth, widths)):
        for bi in range(blocks):
            if si > 0 and bi == 0:
                stages.append(ShuffleUnit(c, w, 2, rng))
            else:
                stages.append(ShuffleUnit(w, w, 1, rng))
            c = w
    return stem, stages, c


_BUILDERS = {
    "resnet": _build_resnet,
    "squeezenet": _build_squeezenet,
    "densenet": _build_densenet,
    "vgg": _build_vgg,
    "mobilenet": _build_mobilenet,
    "shufflenet": _build_shufflenet,
}


class MicroModel(Module):
    """One member network: stem, defining-block stages, feature projection.

    Built headless; ``features`` (and plain call, absent a head) returns a
    length ``feature_dim`` vector per sample. ``adapt_output_layer`` attaches
    a classifier head, after which calling the model returns logits.
    """

    def __init__(self, spec: MicroModelSpec, seed: int):
        super().__init__()
        self.spec = spec
        self.pretrained_tag = None
        self.head = None
        rng = np.random.default_rng(seed)
        self.stem, self.stages, self._channels = _BUILDERS[spec.kind](spec, rng)
        self.project = Linear(self._channels, spec.feature_dim, rng)

    def features(self, x):
        h = self.stem(x)
        for block in self.stages:
            h = block(h)
        return self.project(ops.global_avg_pool(h))

    def forward(self, x):
        f = self.features(x)
        return self.head(f) if self.head is not None else f


def build_micro_model(spec: MicroModelSpec, seed: int) -> MicroModel:
    """Deterministically initialize a member network from (spec, seed)."""
    return MicroModel(spec, seed)


def adapt_input_layer(model: MicroModel, in_channels: int, seed: int = 0):
    """Rebuild the stem convolution for a new channel count, in place.

    The stem conv is freshly initialized even when in_channels matches the
    current value; everything else (stem norm included) is untouched.
    """
    if in_channels < 1:
        raise ConfigError(f"in_channels must be >= 1, got {in_channels}")
    old = model.stem.conv
    rng = np.random.default_rng(seed)
    model.stem.conv = Conv2d(
        in_channels, old.weight.shape[0], old.weight.shape[2], rng,
        old.stride, old.padding, bias=old.bias.requires_grad,
    )
    model.spec = dataclasses.replace(model.spec, in_channels=in_channels)
    return model


def adapt_output_layer(model: MicroModel, num_classes: int, seed: int = 0):
    """Attach (or replace) a fresh linear classifier head, in place."""
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    model.head = Linear(model.spec.feature_dim, num_classes,
                        np.random.default_rng(seed))
    return model
