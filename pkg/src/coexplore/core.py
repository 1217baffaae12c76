"""Domain types for child networks, FPGA devices and search spaces.

Every layer uses same-padding, so spatial output sizes are ``ceil(in / stride)``.
MBConv layers are costed as pointwise expand -> depthwise -> pointwise project.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

CONV = "Conv"
MBCONV = "MBConv"

CONV_CHAIN = "ConvChain"
MBCONV_CHAIN = "MBConvChain"

FIXED1 = "Fixed1"
PREDICTED = "Predicted"


class ShapeUnderflow(ValueError):
    """A tensor dimension would shrink to zero."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int
    kernel: int
    stride: int = 1
    expansion: int = 1

    def __post_init__(self):
        if self.kind not in (CONV, MBCONV):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.filters < 1:
            raise ValueError("filters must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd number")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.expansion < 1:
            raise ValueError("expansion must be positive")
        if self.kind == CONV and self.expansion != 1:
            raise ValueError("Conv layers have expansion 1")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.filters, self.kernel, self.stride, self.expansion)


@dataclass(frozen=True)
class TensorShape:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise ShapeUnderflow(f"invalid tensor shape {self}")

    @property
    def size(self) -> int:
        return self.height * self.width * self.channels

    def as_list(self) -> list[int]:
        return [self.height, self.width, self.channels]

    def __str__(self) -> str:
        return f"{self.height}x{self.width}x{self.channels}"


@dataclass(frozen=True)
class ChildNetwork:
    input: TensorShape
    layers: tuple[LayerSpec, ...]
    precision_bits: int = 16

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a child network needs at least one layer")
        kinds = {layer.kind for layer in self.layers}
        if len(kinds) != 1:
            raise ValueError("mixed Conv/MBConv chains are not supported")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def chain_kind(self) -> str:
        return CONV_CHAIN if self.layers[0].kind == CONV else MBCONV_CHAIN

    def layer_inputs(self) -> list[TensorShape]:
        """Input shape seen by each layer."""
        return [self.input, *derive_shapes(self)[:-1]]


@dataclass(frozen=True)
class FpgaSpec:
    name: str
    logic_cells: int
    onchip_memory_bits: float
    dsp_slices: int
    clock_hz: float
    link_bytes_per_sec: float
    macs_per_dsp_per_cycle: float = 1

    def __post_init__(self):
        for attr in ("logic_cells", "onchip_memory_bits", "dsp_slices", "clock_hz",
                     "link_bytes_per_sec", "macs_per_dsp_per_cycle"):
            if not getattr(self, attr) > 0:
                raise ValueError(f"FpgaSpec.{attr} must be positive")

    @property
    def peak_macs_per_sec(self) -> float:
        return self.dsp_slices * self.clock_hz * self.macs_per_dsp_per_cycle


# Xilinx XC7Z015: 74K logic cells, 4.9 Mb BRAM, 150 DSP slices, 16.8 Gb/s serial link.
XC7Z015 = FpgaSpec(
    name="XC7Z015",
    logic_cells=74_000,
    onchip_memory_bits=4.9e6,
    dsp_slices=150,
    clock_hz=100e6,
    link_bytes_per_sec=16.8e9 / 8,
)


@dataclass(frozen=True)
class FpgaPool:
    devices: tuple[tuple[FpgaSpec, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple((spec, int(n)) for spec, n in self.devices))
        names = [spec.name for spec, _ in self.devices]
        if len(set(names)) != len(names):
            raise ValueError("device names in a pool must be unique")
        if any(n < 0 for _, n in self.devices):
            raise ValueError("device counts must be non-negative")
        if self.total < 1:
            raise ValueError("pool must contain at least one device")

    @classmethod
    def homogeneous(cls, spec: FpgaSpec, count: int) -> "FpgaPool":
        return cls(((spec, count),))

    @property
    def total(self) -> int:
        return sum(n for _, n in self.devices)

    def spec(self, name: str) -> FpgaSpec:
        for spec, _ in self.devices:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def count(self, name: str) -> int:
        for spec, n in self.devices:
            if spec.name == name:
                return n
        return 0

    def sorted_specs(self) -> list[tuple[FpgaSpec, int]]:
        return sorted((d for d in self.devices if d[1] > 0), key=lambda d: d[0].name)


@dataclass(frozen=True)
class SearchSpace:
    """Per-layer choice sets plus depth and input shape of the searched chain."""

    kind: str = CONV_CHAIN
    depth: int | tuple[int, int] = 6
    filter_choices: tuple[int, ...] = (24, 36, 48, 64)
    kernel_choices: tuple[int, ...] = (1, 3, 5, 7)
    stride_choices: tuple[int, ...] = (1, 2)
    expansion_choices: tuple[int, ...] = (1,)
    stride_mode: str = PREDICTED
    input_shape: TensorShape = field(default_factory=lambda: TensorShape(32, 32, 3))

    def __post_init__(self):
        for attr in ("filter_choices", "kernel_choices", "stride_choices", "expansion_choices"):
            values = tuple(getattr(self, attr))
            if not values:
                raise ValueError(f"{attr} must be nonempty")
            object.__setattr__(self, attr, values)
        if self.kind not in (CONV_CHAIN, MBCONV_CHAIN):
            raise ValueError(f"unknown search space kind {self.kind!r}")
        if self.stride_mode not in (FIXED1, PREDICTED):
            raise ValueError(f"unknown stride mode {self.stride_mode!r}")
        if self.stride_mode == FIXED1 and self.stride_choices != (1,):
            raise ValueError("Fixed1 stride mode requires stride_choices == (1,)")
        if self.kind == CONV_CHAIN and self.expansion_choices != (1,):
            raise ValueError("Conv chains have no expansion choice")
        if self.kind == MBCONV_CHAIN and not set(self.expansion_choices) <= {3, 6}:
            raise ValueError("MBConv expansion must be 3 or 6")
        if isinstance(self.depth, int):
            lo = hi = self.depth
        else:
            lo, hi = self.depth
            object.__setattr__(self, "depth", (int(lo), int(hi)))
        if not 1 <= lo <= hi:
            raise ValueError("invalid depth")

    @classmethod
    def cifar(cls, depth=6, stride_mode=PREDICTED) -> "SearchSpace":
        strides = (1, 2) if stride_mode == PREDICTED else (1,)
        return cls(CONV_CHAIN, depth, (24, 36, 48, 64), (1, 3, 5, 7), strides, (1,), stride_mode)

    @classmethod
    def imagenet(cls, depth=15, filter_choices=(16, 24, 32, 64, 96)) -> "SearchSpace":
        return cls(MBCONV_CHAIN, depth, filter_choices, (3, 5, 7), (1, 2), (3, 6), PREDICTED,
                   TensorShape(224, 224, 3))

    @property
    def layer_kind(self) -> str:
        return CONV if self.kind == CONV_CHAIN else MBCONV

    @property
    def min_depth(self) -> int:
        return self.depth if isinstance(self.depth, int) else self.depth[0]

    @property
    def max_depth(self) -> int:
        return self.depth if isinstance(self.depth, int) else self.depth[1]

    def decisions(self) -> list[tuple[str, tuple[int, ...]]]:
        """Per-layer decisions in sampling order: filter, kernel, stride (, expansion)."""
        out = [("filter", self.filter_choices), ("kernel", self.kernel_choices),
               ("stride", self.stride_choices)]
        if self.kind == MBCONV_CHAIN:
            out.append(("expansion", self.expansion_choices))
        return out

    def layer_choices(self) -> int:
        return math.prod(len(c) for _, c in self.decisions())

    def layer_from_indices(self, idx: Sequence[int]) -> LayerSpec:
        values = {name: choices[i] for (name, choices), i in zip(self.decisions(), idx)}
        return LayerSpec(self.layer_kind, values["filter"], values["kernel"], values["stride"],
                         values.get("expansion", 1))

    def layer_to_indices(self, layer: LayerSpec) -> tuple[int, ...]:
        values = {"filter": layer.filters, "kernel": layer.kernel, "stride": layer.stride,
                  "expansion": layer.expansion}
        try:
            return tuple(choices.index(values[name]) for name, choices in self.decisions())
        except ValueError:
            raise ValueError(f"layer {layer} is outside the search space") from None

    def contains(self, net: ChildNetwork) -> bool:
        if net.input != self.input_shape or not self.min_depth <= net.depth <= self.max_depth:
            return False
        try:
            for layer in net.layers:
                if layer.kind != self.layer_kind:
                    return False
                self.layer_to_indices(layer)
        except ValueError:
            return False
        return True

    def network(self, indices: Sequence[Sequence[int]]) -> ChildNetwork:
        return ChildNetwork(self.input_shape, tuple(self.layer_from_indices(i) for i in indices))

    def size(self, depth: int | None = None) -> int:
        depths = [depth] if depth is not None else range(self.min_depth, self.max_depth + 1)
        return sum(self.layer_choices() ** d for d in depths)

    def enumerate(self, depth: int | None = None) -> Iterator[ChildNetwork]:
        depths = [depth] if depth is not None else range(self.min_depth, self.max_depth + 1)
        per_layer = list(itertools.product(*(range(len(c)) for _, c in self.decisions())))
        for d in depths:
            for combo in itertools.product(per_layer, repeat=d):
                yield self.network(combo)

    def random_network(self, rng: np.random.Generator, depth: int | None = None) -> ChildNetwork:
        if depth is None:
            depth = int(rng.integers(self.min_depth, self.max_depth + 1))
        idx = [[int(rng.integers(len(c))) for _, c in self.decisions()] for _ in range(depth)]
        return self.network(idx)


def _out_shape(layer: LayerSpec, shape: TensorShape) -> TensorShape:
    return TensorShape(-(-shape.height // layer.stride), -(-shape.width // layer.stride),
                       layer.filters)


def derive_shapes(net: ChildNetwork) -> list[TensorShape]:
    """Output shape of every layer, in order."""
    shapes = []
    shape = net.input
    for layer in net.layers:
        shape = _out_shape(layer, shape)
        shapes.append(shape)
    return shapes


def count_macs(layer: LayerSpec, in_shape: TensorShape) -> int:
    out = _out_shape(layer, in_shape)
    hw_out = out.height * out.width
    k2 = layer.kernel * layer.kernel
    if layer.kind == CONV:
        return hw_out * layer.filters * k2 * in_shape.channels
    hidden = layer.expansion * in_shape.channels
    expand = in_shape.height * in_shape.width * in_shape.channels * hidden
    depthwise = hw_out * hidden * k2
    project = hw_out * hidden * layer.filters
    return expand + depthwise + project


def layer_params(layer: LayerSpec, in_channels: int) -> int:
    """Weights plus biases of one layer."""
    k2 = layer.kernel * layer.kernel
    if layer.kind == CONV:
        return k2 * in_channels * layer.filters + layer.filters
    hidden = layer.expansion * in_channels
    weights = in_channels * hidden + hidden * k2 + hidden * layer.filters
    return weights + hidden + hidden + layer.filters


def count_params(net: ChildNetwork) -> int:
    total = 0
    channels = net.input.channels
    for layer in net.layers:
        total += layer_params(layer, channels)
        channels = layer.filters
    return total


def canonical_key(net: ChildNetwork) -> str:
    layers = ";".join(",".join(str(v) for v in layer.as_tuple()) for layer in net.layers)
    return f"{net.chain_kind}|{net.input}|{layers}"


def network_from_key(key: str) -> ChildNetwork:
    kind, shape, layers = key.split("|")
    h, w, c = (int(v) for v in shape.split("x"))
    layer_kind = CONV if kind == CONV_CHAIN else MBCONV
    specs = []
    for item in layers.split(";"):
        f, k, s, e = (int(v) for v in item.split(","))
        specs.append(LayerSpec(layer_kind, f, k, s, e))
    return ChildNetwork(TensorShape(h, w, c), tuple(specs))
