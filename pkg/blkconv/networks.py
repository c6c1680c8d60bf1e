"""
Network descriptions: layer chains with optional residual edges.

A network is an ordered list of layers. Every layer consumes the output of
the layer before it; an element-wise sum also consumes the output of its
`residual_source`, which must come earlier in the list. The first layer is
always the implicit `input` layer, whose output is the network input.

Network files are JSON (or YAML) documents:

    {"name": "toy",
     "input_shape": [3, 32, 32],
     "activation_format": "fixed8.4",
     "weight_format": "fixed8.6",
     "layers": [
        {"id": "conv1", "kind": "conv", "k": 3, "stride": 1, "padding": 1,
         "in_ch": 3, "out_ch": 16, "relu": true},
        {"id": "pool1", "kind": "maxpool", "k": 2, "stride": 2},
        {"id": "sum1", "kind": "eltwise_add", "residual_source": "pool1"}]}
"""
from __future__ import annotations
from dataclasses import dataclass, field, replace
from enum import Enum
import json
import logging
import math
from typing import Optional, Sequence

import numpy as np
import yaml
from pandas import DataFrame

from .tensors import (PadMode, ScalarFormat, Tensor4D, Padding, conv2d_ref, conv_output_extent,
                      eltwise_add, maxpool2d, normalize_padding)


INPUT_ID = "input"


class LayerKind(Enum):
    """Kinds of layers."""
    INPUT = "input"
    CONV = "conv"
    MAXPOOL = "maxpool"
    ELTWISE_ADD = "eltwise_add"
    OUTPUT = "output"


class NetworkError(ValueError):
    """A network description is invalid."""

    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(f"{layer}: {message}" if layer else message)
        self.layer = layer


@dataclass(frozen=True)
class LayerDesc:  # pylint: disable=too-many-instance-attributes
    """
    A layer of a network.

    Attributes:
        id: unique layer identifier
        kind: layer kind
        k: kernel size (conv) or window size (maxpool)
        stride: stride (conv, maxpool)
        padding: per-side padding (top, bottom, left, right) (conv)
        in_ch: input channels (conv)
        out_ch: output channels (conv)
        depthwise: depthwise convolution, with in_ch == out_ch (conv)
        relu: apply ReLU to the output (conv, eltwise_add)
        pad_mode: how padded positions are filled (conv)
        residual_source: id of the second operand (eltwise_add)
    """
    id: str
    kind: LayerKind
    k: int = 1
    stride: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)
    in_ch: int = 0
    out_ch: int = 0
    depthwise: bool = False
    relu: bool = False
    pad_mode: PadMode = PadMode.ZERO
    residual_source: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "padding", normalize_padding(self.padding))

    # pylint: disable=too-many-arguments
    @classmethod
    def conv(cls, layer_id: str, in_ch: int, out_ch: int, k: int = 3, stride: int = 1,
             padding: Optional[Padding] = None, depthwise: bool = False, relu: bool = True,
             pad_mode: PadMode = PadMode.ZERO) -> LayerDesc:
        """A convolution layer; padding defaults to `(k - 1) // 2` on every side."""
        return cls(layer_id, LayerKind.CONV, k=k, stride=stride,
                   padding=(k - 1) // 2 if padding is None else padding,
                   in_ch=in_ch, out_ch=out_ch, depthwise=depthwise, relu=relu,
                   pad_mode=pad_mode)

    @classmethod
    def maxpool(cls, layer_id: str, k: int = 2, stride: Optional[int] = None) -> LayerDesc:
        """A max-pooling layer (stride defaults to the window size)."""
        return cls(layer_id, LayerKind.MAXPOOL, k=k, stride=k if stride is None else stride)

    @classmethod
    def eltwise_add(cls, layer_id: str, source: str, relu: bool = False) -> LayerDesc:
        """An element-wise sum with the output of layer `source`."""
        return cls(layer_id, LayerKind.ELTWISE_ADD, relu=relu, residual_source=source)

    @property
    def is_conv(self) -> bool:
        """Is this a convolution layer?"""
        return self.kind == LayerKind.CONV

    @property
    def weight_count(self) -> int:
        """Number of weights of a convolution layer (0 otherwise)."""
        if not self.is_conv:
            return 0
        return self.out_ch * (1 if self.depthwise else self.in_ch) * self.k * self.k

    def to_dict(self) -> dict:
        """A JSON-serializable description, without default-valued fields."""
        result: dict = {"id": self.id, "kind": self.kind.value}
        if self.kind == LayerKind.CONV:
            result.update(k=self.k, stride=self.stride, padding=list(self.padding),
                          in_ch=self.in_ch, out_ch=self.out_ch)
            if self.depthwise:
                result["depthwise"] = True
            if self.pad_mode != PadMode.ZERO:
                result["pad_mode"] = self.pad_mode.value
        elif self.kind == LayerKind.MAXPOOL:
            result.update(k=self.k, stride=self.stride)
        if self.relu:
            result["relu"] = True
        if self.residual_source is not None:
            result["residual_source"] = self.residual_source
        return result

    @classmethod
    def from_dict(cls, content: dict) -> LayerDesc:
        """Parse a layer description."""
        layer_id = content.get("id") if isinstance(content, dict) else None
        if not isinstance(layer_id, str) or not layer_id:
            raise NetworkError(f"Layer without a valid id: {content}")
        try:
            kind = LayerKind(content["kind"])
            if kind == LayerKind.CONV:
                return cls.conv(layer_id, in_ch=int(content["in_ch"]),
                                out_ch=int(content["out_ch"]), k=int(content.get("k", 3)),
                                stride=int(content.get("stride", 1)),
                                padding=content.get("padding"),
                                depthwise=bool(content.get("depthwise", False)),
                                relu=bool(content.get("relu", False)),
                                pad_mode=PadMode(content.get("pad_mode", "zero")))
            if kind == LayerKind.MAXPOOL:
                stride = content.get("stride")
                return cls.maxpool(layer_id, k=int(content.get("k", 2)),
                                   stride=None if stride is None else int(stride))
            if kind == LayerKind.ELTWISE_ADD:
                return cls.eltwise_add(layer_id, source=str(content["residual_source"]),
                                       relu=bool(content.get("relu", False)))
            return cls(layer_id, kind)
        except KeyError as error:
            raise NetworkError(f"Missing field {error}", layer=layer_id) from error
        except (TypeError, ValueError) as error:
            raise NetworkError(str(error), layer=layer_id) from error


Shape = tuple[int, int, int]


@dataclass(frozen=True)
class NetworkDesc:
    """
    A validated network.

    Attributes:
        name: network name
        input_shape: (channels, rows, cols) of the network input
        activation_format: format of all feature maps
        weight_format: format of all weights
        layers: the layers, starting with the `input` layer
    """
    name: str
    input_shape: Shape
    activation_format: ScalarFormat
    weight_format: ScalarFormat
    layers: tuple[LayerDesc, ...]
    _shapes: dict = field(init=False, repr=False, compare=False)
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers or layers[0].kind != LayerKind.INPUT:
            layers = (LayerDesc(INPUT_ID, LayerKind.INPUT),) + layers
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        index = {}
        for position, layer in enumerate(layers):
            if layer.id in index:
                raise NetworkError("Duplicate layer id", layer=layer.id)
            if layer.kind == LayerKind.INPUT and position > 0:
                raise NetworkError("Input layer must come first", layer=layer.id)
            if layer.kind == LayerKind.OUTPUT and position != len(layers) - 1:
                raise NetworkError("Output layer must come last", layer=layer.id)
            if layer.kind == LayerKind.ELTWISE_ADD and layer.residual_source not in index:
                raise NetworkError(
                    f"Residual source {layer.residual_source} does not precede the layer",
                    layer=layer.id)
            index[layer.id] = position
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_shapes", infer_shapes(self))

    def layer(self, layer_id: str) -> LayerDesc:
        """The layer with id `layer_id`."""
        try:
            return self.layers[self._index[layer_id]]
        except KeyError as error:
            raise NetworkError("No such layer", layer=layer_id) from error

    def index(self, layer_id: str) -> int:
        """Position of layer `layer_id`."""
        self.layer(layer_id)
        return self._index[layer_id]

    def producer(self, layer_id: str) -> Optional[LayerDesc]:
        """The layer whose output `layer_id` consumes (None for the input layer)."""
        position = self.index(layer_id)
        return self.layers[position - 1] if position > 0 else None

    def shape(self, layer_id: str) -> Shape:
        """Output shape (c, h, w) of layer `layer_id`."""
        self.layer(layer_id)
        return self._shapes[layer_id]

    def input_of(self, layer_id: str) -> Shape:
        """Shape (c, h, w) of the main input of layer `layer_id`."""
        producer = self.producer(layer_id)
        return self.input_shape if producer is None else self.shape(producer.id)

    @property
    def shapes(self) -> dict[str, Shape]:
        """Output shape of every layer, in layer order."""
        return dict(self._shapes)

    @property
    def conv_layers(self) -> list[LayerDesc]:
        """The convolution layers, in order."""
        return [layer for layer in self.layers if layer.is_conv]

    @property
    def compute_layers(self) -> list[LayerDesc]:
        """The layers that compute something: convolutions, poolings and sums."""
        return [layer for layer in self.layers
                if layer.kind in (LayerKind.CONV, LayerKind.MAXPOOL, LayerKind.ELTWISE_ADD)]

    @property
    def output_id(self) -> str:
        """Id of the layer producing the network output."""
        return self.layers[-1].id

    def consumers(self, layer_id: str) -> list[str]:
        """Ids of the layers reading the output of `layer_id`."""
        position = self.index(layer_id)
        result = []
        for later in self.layers[position + 1:]:
            if self.producer(later.id).id == layer_id or later.residual_source == layer_id:
                result.append(later.id)
        return result

    def with_formats(self, activation_format: ScalarFormat,
                     weight_format: Optional[ScalarFormat] = None) -> NetworkDesc:
        """The same network with other scalar formats."""
        return replace(self, activation_format=activation_format,
                       weight_format=weight_format or self.weight_format)


def infer_shapes(net: NetworkDesc) -> dict[str, Shape]:
    """
    Infer the output shape (c, h, w) of every layer.

    Raises:
        NetworkError: A layer has non-positive extents or mismatching channels.
    """
    shapes: dict[str, Shape] = {}
    current: Shape = tuple(net.input_shape)  # type: ignore[assignment]
    if len(current) != 3 or min(current) <= 0:
        raise NetworkError(f"Invalid input shape {net.input_shape}", layer=INPUT_ID)
    for layer in net.layers:
        channels, rows, cols = current
        try:
            if layer.kind == LayerKind.CONV:
                if layer.in_ch != channels:
                    raise NetworkError(f"Expects {layer.in_ch} input channels, gets {channels}",
                                       layer=layer.id)
                if layer.depthwise and layer.out_ch != layer.in_ch:
                    raise NetworkError("Depthwise layers need in_ch == out_ch", layer=layer.id)
                if layer.out_ch <= 0 or layer.k <= 0:
                    raise NetworkError("Channels and kernel size must be positive",
                                       layer=layer.id)
                top, bottom, left, right = layer.padding
                current = (layer.out_ch,
                           conv_output_extent(rows, layer.k, layer.stride, top, bottom),
                           conv_output_extent(cols, layer.k, layer.stride, left, right))
            elif layer.kind == LayerKind.MAXPOOL:
                current = (channels,
                           conv_output_extent(rows, layer.k, layer.stride, 0, 0),
                           conv_output_extent(cols, layer.k, layer.stride, 0, 0))
            elif layer.kind == LayerKind.ELTWISE_ADD:
                if shapes[layer.residual_source] != current:
                    raise NetworkError(
                        f"Operand shapes {current} and {shapes[layer.residual_source]} differ",
                        layer=layer.id)
        except ValueError as error:
            if isinstance(error, NetworkError):
                raise
            raise NetworkError(str(error), layer=layer.id) from error
        shapes[layer.id] = current
        logging.debug("Layer %s: output shape %s", layer.id, current)
    return shapes


_UNIT_BITS = {"bit": 1, "Kbit": 1 << 10, "Mbit": 1 << 20, "KB": 8 << 10, "MB": 8 << 20}


def fmap_volume(shape: Sequence[int], bits: int, unit: str = "Mbit") -> float:
    """Volume of a (c, h, w) feature map with `bits` per value, in binary `unit`s."""
    if unit not in _UNIT_BITS:
        raise ValueError(f"Unknown unit {unit}, expected one of {list(_UNIT_BITS)}")
    return math.prod(shape) * bits / _UNIT_BITS[unit]


def feature_map_volumes(net: NetworkDesc, unit: str = "Mbit", bits: Optional[int] = None,
                        conv_only: bool = True) -> DataFrame:
    """
    Volume of the output feature map of every layer.

    Args:
        net: The network.
        unit: One of bit, Kbit, Mbit (2**20 bits), KB, MB (2**20 bytes).
        bits: Bits per activation (default: the network's activation bitwidth).
        conv_only: Only list convolution layers.

    Returns:
        A DataFrame with columns layer, kind, channels, height, width and `unit`.
    """
    bits = net.activation_format.bitwidth if bits is None else bits
    rows = []
    for layer in net.layers:
        if layer.kind == LayerKind.INPUT or (conv_only and not layer.is_conv):
            continue
        channels, height, width = net.shape(layer.id)
        rows.append([layer.id, layer.kind.value, channels, height, width,
                     fmap_volume((channels, height, width), bits, unit)])
    return DataFrame(rows, columns=["layer", "kind", "channels", "height", "width", unit])


def network_to_dict(net: NetworkDesc) -> dict:
    """A JSON-serializable description of a network."""
    return {
        "name": net.name,
        "input_shape": list(net.input_shape),
        "activation_format": str(net.activation_format),
        "weight_format": str(net.weight_format),
        "layers": [layer.to_dict() for layer in net.layers
                   if layer.kind != LayerKind.INPUT or layer.id != INPUT_ID],
    }


def network_from_dict(content: dict) -> NetworkDesc:
    """
    Build and validate a network from its description.

    Raises:
        NetworkError: The description violates the schema or does not shape-check.
    """
    if not isinstance(content, dict):
        raise NetworkError("A network description must be a mapping")
    try:
        layers = [LayerDesc.from_dict(layer) for layer in content.get("layers") or []]
        return NetworkDesc(name=str(content.get("name", "network")),
                           input_shape=tuple(content["input_shape"]),
                           activation_format=ScalarFormat.parse(
                               content.get("activation_format", "fixed8")),
                           weight_format=ScalarFormat.parse(
                               content.get("weight_format", "fixed8")),
                           layers=tuple(layers))
    except KeyError as error:
        raise NetworkError(f"Missing field {error}") from error
    except NetworkError:
        raise
    except (TypeError, ValueError) as error:
        raise NetworkError(str(error)) from error


def load_network(file_path: str) -> NetworkDesc:
    """Read a network from a JSON or YAML file."""
    with open(file_path, "r", encoding="utf-8") as file:
        try:
            content = yaml.safe_load(file)
        except yaml.YAMLError as error:
            raise NetworkError(f"Cannot parse {file_path}: {error}") from error
    net = network_from_dict(content)
    logging.info("Loaded network %s with %d layers from %s",
                 net.name, len(net.layers), file_path)
    return net


def save_network(net: NetworkDesc, file_path: str) -> None:
    """Write a network to a JSON file."""
    with open(file_path, "w", encoding="utf-8") as file:
        json.dump(network_to_dict(net), file, indent=2)
    logging.info("Written network %s to %s", net.name, file_path)


@dataclass(frozen=True, eq=False)
class LayerParams:
    """Weights and bias of a convolution layer."""
    weights: Tensor4D
    bias: Optional[np.ndarray] = None


def init_params(net: NetworkDesc, seed: int = 0) -> dict[str, LayerParams]:
    """
    Deterministic pseudo-random parameters for every convolution layer.

    Weights are drawn with standard deviation 1/sqrt(fan-in) in real units,
    but at least one integer step for fixed formats; biases are small.
    Fixed-point biases are integers at the accumulator scale.
    """
    rng = np.random.default_rng(seed)
    act, wfmt = net.activation_format, net.weight_format
    result = {}
    for layer in net.conv_layers:
        fan_in = layer.k * layer.k * (1 if layer.depthwise else layer.in_ch)
        dims = (layer.out_ch, 1 if layer.depthwise else layer.in_ch, layer.k, layer.k)
        noise = rng.standard_normal(size=dims)
        bias_noise = rng.standard_normal(size=layer.out_ch) * 0.1
        if wfmt.is_fixed:
            std = max(wfmt.scale / math.sqrt(fan_in), 1.0)
            weights = Tensor4D(wfmt.saturate(np.rint(noise * std).astype(np.int64)), wfmt)
            acc_scale = 1 << (act.fraction_bits + wfmt.fraction_bits)
            bias = np.rint(bias_noise * acc_scale).astype(np.int64)
        else:
            weights = Tensor4D(noise / math.sqrt(fan_in), wfmt)
            bias = bias_noise
        result[layer.id] = LayerParams(weights, bias)
    return result


def apply_layer(layer: LayerDesc, x: Tensor4D, params: Optional[LayerParams] = None,
                residual: Optional[Tensor4D] = None,
                out_fmt: Optional[ScalarFormat] = None) -> Tensor4D:
    """Evaluate a single layer on whole feature maps."""
    if layer.kind == LayerKind.CONV:
        if params is None:
            raise ValueError(f"Missing parameters for layer {layer.id}")
        return conv2d_ref(x, params.weights, params.bias, stride=layer.stride,
                          padding=layer.padding, pad_mode=layer.pad_mode,
                          depthwise=layer.depthwise, relu=layer.relu, out_fmt=out_fmt)
    if layer.kind == LayerKind.MAXPOOL:
        return maxpool2d(x, layer.k, layer.stride)
    if layer.kind == LayerKind.ELTWISE_ADD:
        return eltwise_add(x, residual, relu=layer.relu)
    return x


def forward_maps(net: NetworkDesc, params: dict[str, LayerParams],
                 x: Tensor4D) -> dict[str, Tensor4D]:
    """Output map of every layer when evaluating `net` on input `x`."""
    expected = (1,) + tuple(net.input_shape)
    if x.dims != expected:
        raise ValueError(f"Input of dimensions {x.dims}, network expects {expected}")
    maps: dict[str, Tensor4D] = {}
    current = x
    for layer in net.layers:
        residual = maps[layer.residual_source] if layer.residual_source else None
        current = apply_layer(layer, current, params.get(layer.id), residual,
                              out_fmt=net.activation_format)
        maps[layer.id] = current
    return maps


def reference_forward(net: NetworkDesc, params: dict[str, LayerParams],
                      x: Tensor4D) -> Tensor4D:
    """Network output computed layer by layer with the reference kernels."""
    return forward_maps(net, params, x)[net.output_id]
