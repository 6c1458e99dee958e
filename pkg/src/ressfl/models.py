"""Splittable classifiers, bottleneck layers, inversion-model tiers and FLOP counting.

Architecture strings are ``-``-joined tokens::

    conv<C>[k<K>][s<S>]   Conv2D(C, kernel K=3, stride S=1, same padding) + ReLU
    pool                  MaxPool2x2
    fc<N>                 Dense(N) + ReLU (hidden layer)
    fc                    final Dense(num_classes); must be the last token

A Flatten is inserted automatically before the first ``fc``.
"""
from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (Conv2D, ConvTranspose2D, Dense, Flatten, Layer, MaxPool2x2, ReLU, Residual,
                     Sequential, Sigmoid)

DEFAULT_ARCH = "conv8-pool-conv16-pool-conv32-fc"
TIERS = ("L0", "L1", "L2", "L3")
# (residual pairs, width multiplier); L0 is two plain convolutions instead of residual pairs.
TIER_SHAPE = {"L0": (0, 1), "L1": (2, 1), "L2": (4, 2), "L3": (6, 4)}
WEIGHTED = ("Conv2D", "Dense", "ConvTranspose2D")

_TOKEN = re.compile(r"^(?:conv(?P<c>\d+)(?:k(?P<k>\d+))?(?:s(?P<s>\d+))?|(?P<pool>pool)|fc(?P<n>\d+)?)$")


@dataclass(frozen=True)
class Token:
    op: str
    channels: int = 0
    kernel: int = 3
    stride: int = 1


def parse_arch(spec: str) -> list[Token]:
    tokens = []
    parts = [p for p in spec.strip().split("-") if p]
    if not parts:
        raise ConfigError("empty architecture string")
    for i, part in enumerate(parts):
        m = _TOKEN.match(part)
        if not m:
            raise ConfigError(f"bad architecture token {part!r} in {spec!r}")
        if m.group("c"):
            tokens.append(Token("conv", int(m.group("c")), int(m.group("k") or 3), int(m.group("s") or 1)))
        elif m.group("pool"):
            tokens.append(Token("pool"))
        else:
            n = m.group("n")
            if n is None and i != len(parts) - 1:
                raise ConfigError(f"bare 'fc' must be the last token in {spec!r}")
            tokens.append(Token("fc", int(n) if n else 0))
    if tokens[-1].op != "fc":
        raise ConfigError(f"architecture {spec!r} must end with an fc layer")
    if any(t.channels < 1 or t.kernel < 1 or t.stride < 1 for t in tokens if t.op == "conv"):
        raise ConfigError(f"conv sizes must be positive in {spec!r}")
    return tokens


def _layers_for(tokens: Sequence[Token], in_shape, num_classes: int, rng: np.random.Generator,
                flattened: bool = False) -> list[list[Layer]]:
    """One group of layers per token; groups hold the weighted layer plus its activation."""
    groups: list[list[Layer]] = []
    shape = tuple(in_shape)
    for i, t in enumerate(tokens):
        last = i == len(tokens) - 1
        if t.op == "conv":
            group = [Conv2D(shape[0], t.channels, t.kernel, t.stride, rng=rng), ReLU()]
        elif t.op == "pool":
            group = [MaxPool2x2()]
        else:
            group = []
            if not flattened:
                group.append(Flatten())
                flattened = True
                shape = (int(np.prod(shape)),)
            out = t.channels or num_classes
            if last and out != num_classes:
                raise ConfigError(f"final fc has {out} outputs but the task has {num_classes} classes")
            group.append(Dense(shape[0], out, rng=rng))
            if not last:
                group.append(ReLU())
        for layer in group:
            shape = layer.output_shape(shape)
        groups.append(group)
    return groups


@dataclass(frozen=True)
class BottleneckConfig:
    channels: int
    stride: int = 1

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"bottleneck channels must be positive, got {self.channels}")
        if self.stride not in (1, 2):
            raise ConfigError(f"bottleneck stride must be 1 or 2, got {self.stride}")

    @classmethod
    def parse(cls, text: str) -> "BottleneckConfig":
        m = re.fullmatch(r"[cC](\d+)-[sS](\d+)", text.strip())
        if not m:
            raise ConfigError(f"bottleneck must look like 'C8-S1', got {text!r}")
        return cls(int(m.group(1)), int(m.group(2)))

    def __str__(self) -> str:
        return f"C{self.channels}-S{self.stride}"


@dataclass
class SplitModel:
    client: Sequential
    server: Sequential
    cut_layer: int
    arch: str
    input_shape: tuple[int, int, int]
    num_classes: int
    bottleneck: BottleneckConfig | None = None
    server_tokens: list[Token] = field(default_factory=list, repr=False)

    @property
    def activation_shape(self) -> tuple[int, ...]:
        return self.client.output_shape(self.input_shape)

    def full(self) -> Sequential:
        """The unsplit network (sharing layer objects with both halves)."""
        return Sequential(self.client.layers + self.server.layers)

    def validate(self) -> None:
        out = self.server.output_shape(self.activation_shape)
        if out != (self.num_classes,):
            raise ShapeError(f"model output shape {out} != ({self.num_classes},)")

    def copy(self) -> "SplitModel":
        return copy.deepcopy(self)


def count_weighted(layers: Sequence[Layer]) -> int:
    return sum(1 for layer in layers if layer.kind in WEIGHTED)


def build_split_classifier(arch: str, cut_layer: int, input_shape, num_classes: int,
                           seed: int | np.random.Generator = 0) -> SplitModel:
    """Build the classifier described by ``arch`` and split it after ``cut_layer`` weighted layers.

    Initialization draws from one stream in network order, so the parameters do
    not depend on where the network is cut.
    """
    tokens = parse_arch(arch)
    n_weighted = sum(1 for t in tokens if t.op in ("conv", "fc"))
    if not 1 <= cut_layer < n_weighted:
        raise ConfigError(f"cut_layer must be in [1, {n_weighted - 1}] for {arch!r}, got {cut_layer}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    groups = _layers_for(tokens, input_shape, num_classes, rng)
    seen, split = 0, len(tokens)
    for i, t in enumerate(tokens):
        if t.op in ("conv", "fc"):
            seen += 1
            if seen == cut_layer:
                split = i + 1
                # trailing pools stay on the client
                while split < len(tokens) and tokens[split].op == "pool":
                    split += 1
                break
    client_layers = [layer for g in groups[:split] for layer in g]
    server_layers = [layer for g in groups[split:] for layer in g]
    model = SplitModel(Sequential(client_layers), Sequential(server_layers), cut_layer, arch,
                       tuple(input_shape), num_classes, None, tokens[split:])
    model.validate()
    return model


def insert_bottleneck(model: SplitModel, cfg: BottleneckConfig,
                      seed: int | np.random.Generator = 0) -> SplitModel:
    """Append the ``l_in``/``l_out`` convolution pair to the client part.

    ``l_in`` compresses to ``cfg.channels`` with stride ``cfg.stride``; ``l_out``
    restores the original channel count at stride 1.  If the reduced spatial
    size no longer fits the server's dense layers, the server part is rebuilt.
    """
    if model.bottleneck is not None:
        raise ConfigError(f"model already has bottleneck {model.bottleneck}")
    act = model.activation_shape
    if len(act) != 3:
        raise ShapeError(f"bottleneck needs a [C,H,W] activation, got {list(act)}")
    if cfg.channels > act[0]:
        raise ConfigError(f"bottleneck channels {cfg.channels} exceed activation channels {act[0]}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    l_in = Conv2D(act[0], cfg.channels, 3, cfg.stride, 1, rng=rng)
    l_out = Conv2D(cfg.channels, act[0], 3, 1, 1, rng=rng)
    pair = [l_in, ReLU(), l_out, ReLU()]
    new_act = Sequential(pair).output_shape(act)
    out = copy.copy(model)
    out.client = Sequential(model.client.layers + pair)
    out.bottleneck = cfg
    try:
        out.server.output_shape(new_act)
    except ShapeError:
        groups = _layers_for(model.server_tokens, new_act, model.num_classes, rng)
        out.server = Sequential([layer for g in groups for layer in g])
    out.validate()
    return out


def build_inversion_model(tier: str, activation_shape, image_shape, base_width: int = 8,
                          seed: int | np.random.Generator = 0) -> Sequential:
    """Decoder of the given tier mapping ``activation_shape`` to ``image_shape``.

    L0 is two plain convolutions; L1-L3 use a stem convolution followed by
    residual conv pairs.  Stride-2 transposed convolutions then upsample to
    the image size and a Sigmoid keeps pixels in [0, 1].
    """
    if tier not in TIER_SHAPE:
        raise ConfigError(f"unknown inversion tier {tier!r}; expected one of {TIERS}")
    c_act, h_act, w_act = (int(v) for v in activation_shape)
    c_img, h_img, w_img = (int(v) for v in image_shape)
    if h_act < 1 or w_act < 1:
        raise ShapeError(f"activation spatial dims must be >= 1, got {list(activation_shape)}")
    if h_img % h_act or w_img % w_act or h_img // h_act != w_img // w_act:
        raise ShapeError(f"cannot upsample {list(activation_shape)} to {list(image_shape)} by an integer factor")
    factor = h_img // h_act
    stages = int(round(math.log2(factor)))
    if 2 ** stages != factor:
        raise ShapeError(f"upsampling factor {factor} is not a power of two")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pairs, mult = TIER_SHAPE[tier]
    width = base_width * mult
    layers: list[Layer] = [Conv2D(c_act, width, 3, 1, 1, rng=rng), ReLU()]
    if tier == "L0":
        layers += [Conv2D(width, width, 3, 1, 1, rng=rng), ReLU()]
    for _ in range(pairs):
        layers += [Residual([Conv2D(width, width, 3, 1, 1, rng=rng), ReLU(),
                             Conv2D(width, width, 3, 1, 1, rng=rng)]), ReLU()]
    if stages == 0:
        layers.append(ConvTranspose2D(width, c_img, 3, 1, 1, 0, rng=rng))
    for s in range(stages):
        last = s == stages - 1
        layers.append(ConvTranspose2D(width, c_img if last else width, 3, 2, 1, 1, rng=rng))
        if not last:
            layers.append(ReLU())
    layers.append(Sigmoid())
    net = Sequential(layers)
    out = net.output_shape((c_act, h_act, w_act))
    if out != (c_img, h_img, w_img):
        raise ShapeError(f"{tier} decoder produces {list(out)}, expected {list(image_shape)}")
    return net


def tier_width(tier: str, base_width: int = 8) -> tuple[int, int]:
    """(residual pairs, channel width) of a tier."""
    pairs, mult = TIER_SHAPE[tier]
    return pairs, base_width * mult


def count_flops(network: Layer, input_shape) -> int:
    return int(network.flops(tuple(input_shape)))
