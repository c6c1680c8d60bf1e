"""
Functional simulation of accelerator dataflows.

Both dataflows compute every layer with exact arithmetic and count every
off-chip transfer, in bits:

    baseline: every convolution runs in (T_r, T_c, T_m, T_n) tiles; each phase
      reads a halo-extended input tile and a weight chunk from DRAM, and every
      output tile is written back, so intermediate maps go through DRAM;
    fused: the groups of a fusion plan run block by block, depth first, with
      ping-pong intermediate buffers, merge buffers and skip buffers; only
      group inputs and outputs may leave the chip.

Feature-map traffic is counted per tensor class: every map read by a layer
counts once at its full size (input_image or intermediate_read), every map
written counts once (intermediate_write or output). Halo overlap, re-reads
across output-channel tiles and residual operand reads are reported in the
separate overhead columns halo, reread and residual.

Without an input tensor a simulation runs in shapes-only mode: traffic,
buffer occupancy and trace are the same, but nothing is computed.
"""
from __future__ import annotations
from dataclasses import asdict, dataclass, field
from enum import Enum
import io
import json
import logging
import math
from typing import NamedTuple, Optional, Sequence

import numpy as np
from pandas import DataFrame, read_csv

from .blocking import Block, BlockingPlan, LayerBlocking
from .networks import INPUT_ID, LayerDesc, LayerKind, LayerParams, NetworkDesc, init_params
from .planner import (FusionPlan, PlanMismatchError, ResidualRoute, Stage, blocking_from_plan,
                      boundary_maps, check_groups, group_stages, residual_plan)
from .tensors import (PadMode, Tensor4D, conv2d_accumulate, eltwise_add, maxpool2d,
                      requantize)


MBIT = 1 << 20


class BufferRole(Enum):
    """Roles of on-chip buffers."""
    INPUT = "input"
    OUTPUT = "output"
    INTERMEDIATE_1 = "intermediate_1"
    INTERMEDIATE_2 = "intermediate_2"
    INTERMEDIATE_3 = "intermediate_3"
    EXTRA = "extra"
    WEIGHT = "weight"
    BOUNDARY = "boundary"


class BufferOverflowError(RuntimeError):
    """A buffer exceeds its capacity."""

    def __init__(self, step: int, buffer: str, capacity: int, requested: int):
        super().__init__(f"Step {step}: buffer {buffer} needs {requested} bits, "
                         f"capacity is {capacity}")
        self.step = step
        self.buffer = buffer
        self.capacity = capacity
        self.requested = requested


@dataclass
class BufferState:
    """
    Occupancy of an on-chip buffer.

    Attributes:
        role: buffer role
        name: buffer name
        capacity_bits: capacity, or None when unbounded
        occupied_bits: bits currently held
        resident: bits held per tensor descriptor
        peak_bits: largest occupancy so far
    """
    role: BufferRole
    name: str
    capacity_bits: Optional[int] = None
    occupied_bits: int = 0
    resident: dict[str, int] = field(default_factory=dict)
    peak_bits: int = 0

    def fill(self, tensor: str, bits: int, step: int) -> None:
        """Replace the contents by a tensor."""
        self.resident = {tensor: bits}
        self._update(step)

    def add(self, tensor: str, bits: int, step: int) -> None:
        """Add a tensor to the contents."""
        self.resident[tensor] = self.resident.get(tensor, 0) + bits
        self._update(step)

    def remove(self, tensor: str) -> None:
        """Drop a tensor."""
        self.resident.pop(tensor, None)
        self.occupied_bits = sum(self.resident.values())

    def clear(self) -> None:
        """Drop everything."""
        self.resident = {}
        self.occupied_bits = 0

    def _update(self, step: int) -> None:
        self.occupied_bits = sum(self.resident.values())
        self.peak_bits = max(self.peak_bits, self.occupied_bits)
        if self.capacity_bits is not None and self.occupied_bits > self.capacity_bits:
            raise BufferOverflowError(step, self.name, self.capacity_bits, self.occupied_bits)


class EventKind(Enum):
    """Kinds of trace events."""
    LOAD = "load"
    COMPUTE = "compute"
    STORE = "store"
    SWAP = "swap"


@dataclass(frozen=True)
class TraceEvent:
    """
    A simulation step.

    Tensor descriptors name a map region as `map[r0:r1,c0:c1]`, with an
    optional `@ch0:ch1` channel range; weights are `w:layer`, weight chunks
    `w:layer[m0:m1,n0:n1]`.
    """
    step: int
    kind: EventKind
    layer: Optional[str]
    block: Optional[tuple[int, int]]
    buffer: Optional[str]
    bits: int
    tensor: str
    sources: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        """A JSON-serializable description."""
        return {"step": self.step, "kind": self.kind.value, "layer": self.layer,
                "block": None if self.block is None else list(self.block),
                "buffer": self.buffer, "bits": self.bits, "tensor": self.tensor,
                "sources": list(self.sources)}


@dataclass
class PhaseTrace:
    """Ordered simulation events; with `keep_events` off only steps are counted."""
    events: list[TraceEvent] = field(default_factory=list)
    keep_events: bool = True
    steps: int = 0

    # pylint: disable=too-many-arguments
    def record(self, kind: EventKind, layer: Optional[str], block: Optional[tuple[int, int]],
               buffer: Optional[str], bits: int, tensor: str,
               sources: Sequence[str] = ()) -> int:
        """Record an event and return its step index."""
        step = self.steps
        self.steps += 1
        if self.keep_events:
            self.events.append(TraceEvent(step, kind, layer, block, buffer, int(bits), tensor,
                                          tuple(sources)))
        return step

    def __len__(self) -> int:
        return self.steps

    def count(self, kind: EventKind) -> int:
        """Number of recorded events of a kind."""
        return sum(1 for event in self.events if event.kind == kind)

    def undefined_sources(self) -> list[tuple[int, str]]:
        """(step, tensor) of every compute source neither loaded nor produced before."""
        available: set[str] = set()
        missing = []
        for event in self.events:
            if event.kind == EventKind.COMPUTE:
                missing += [(event.step, source) for source in event.sources
                            if source not in available]
            if event.kind != EventKind.STORE:
                available.add(event.tensor)
        return missing

    def to_jsonl(self, file_path: str) -> None:
        """Write one JSON object per event."""
        with open(file_path, "w", encoding="utf-8") as file:
            for event in self.events:
                file.write(json.dumps(event.to_dict()) + "\n")
        logging.info("Written %d trace events to %s", len(self.events), file_path)


TRAFFIC_COLUMNS = ("input_image", "weights", "intermediate_read", "intermediate_write",
                   "output", "halo", "residual", "reread")


@dataclass
class LayerTraffic:  # pylint: disable=too-many-instance-attributes
    """Off-chip bits moved on behalf of one layer."""
    layer: str
    input_image: int = 0
    weights: int = 0
    intermediate_read: int = 0
    intermediate_write: int = 0
    output: int = 0
    halo: int = 0
    residual: int = 0
    reread: int = 0


@dataclass
class TrafficReport:
    """Off-chip traffic per layer, in layer order of first access."""
    layers: dict[str, LayerTraffic] = field(default_factory=dict)

    def entry(self, layer_id: str) -> LayerTraffic:
        """The traffic of a layer, created empty on first access."""
        if layer_id not in self.layers:
            self.layers[layer_id] = LayerTraffic(layer_id)
        return self.layers[layer_id]

    def add(self, layer_id: str, column: str, bits: int) -> None:
        """Count `bits` in a column of a layer."""
        if column not in TRAFFIC_COLUMNS:
            raise ValueError(f"Unknown traffic column {column}")
        entry = self.entry(layer_id)
        setattr(entry, column, getattr(entry, column) + int(bits))

    def total(self, column: str) -> int:
        """Sum of a column over all layers."""
        return sum(getattr(entry, column) for entry in self.layers.values())

    @property
    def intermediate_fmap(self) -> int:
        """Bits of intermediate feature maps written and read."""
        return self.total("intermediate_read") + self.total("intermediate_write")

    @property
    def fmap_bits(self) -> int:
        """All feature-map traffic: input image, intermediate maps and output."""
        return self.total("input_image") + self.intermediate_fmap + self.total("output")

    def summary(self) -> dict[str, int]:
        """Bits per tensor class."""
        return {
            "input_image": self.total("input_image"),
            "weights": self.total("weights"),
            "intermediate_fmap": self.intermediate_fmap,
            "output": self.total("output"),
            "fmap_total": self.fmap_bits,
            "halo": self.total("halo"),
            "residual": self.total("residual"),
            "reread": self.total("reread"),
        }

    def to_frame(self) -> DataFrame:
        """One row per layer."""
        return DataFrame([asdict(entry) for entry in self.layers.values()],
                         columns=["layer", *TRAFFIC_COLUMNS])

    def summary_frame(self) -> DataFrame:
        """One row per tensor class, in bits and binary Mbits."""
        return DataFrame([[name, bits, bits / MBIT] for name, bits in self.summary().items()],
                         columns=["tensor_class", "bits", "mbits"])

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> TrafficReport:
        """Rebuild a report from per-layer records."""
        report = cls()
        for record in records:
            entry = LayerTraffic(str(record["layer"]),
                                 **{c: int(record.get(c, 0)) for c in TRAFFIC_COLUMNS})
            report.layers[entry.layer] = entry
        return report


def traffic_report_render(report: TrafficReport, fmt: str = "csv", summary: bool = False) -> str:
    """
    Serialize a traffic report.

    Args:
        report: The report.
        fmt: "csv" or "json".
        summary: Render the tensor-class summary instead of the per-layer table.
    """
    if fmt == "csv":
        frame = report.summary_frame() if summary else report.to_frame()
        return frame.to_csv(index=False)
    if fmt == "json":
        if summary:
            records = [{"tensor_class": name, "bits": bits, "mbits": bits / MBIT}
                       for name, bits in report.summary().items()]
        else:
            records = [asdict(entry) for entry in report.layers.values()]
        return json.dumps(records, indent=2)
    raise ValueError(f"Unknown report format {fmt}")


def traffic_report_parse(text: str, fmt: str = "csv") -> TrafficReport:
    """Parse a per-layer report rendered by `traffic_report_render`."""
    if fmt == "csv":
        frame = read_csv(io.StringIO(text), dtype={"layer": str})
        return TrafficReport.from_records(frame.to_dict(orient="records"))
    if fmt == "json":
        return TrafficReport.from_records(json.loads(text))
    raise ValueError(f"Unknown report format {fmt}")


@dataclass
class SimulationResult:
    """
    Outcome of a simulation.

    Attributes:
        output: network output (None in shapes-only mode)
        traffic: off-chip traffic
        trace: simulation events
        peaks: largest occupancy of every buffer
        capacities: capacity of every buffer (None when unbounded)
    """
    output: Optional[Tensor4D]
    traffic: TrafficReport
    trace: PhaseTrace
    peaks: dict[str, int]
    capacities: dict[str, Optional[int]]


@dataclass(frozen=True)
class Tiling:
    """Output tile (T_r, T_c) and channel tiles (T_m, T_n); None means all channels."""
    tr: int
    tc: int
    tm: Optional[int] = None
    tn: Optional[int] = None

    def __post_init__(self):
        if any(t is not None and t <= 0 for t in (self.tr, self.tc, self.tm, self.tn)):
            raise ValueError(f"Tile sizes must be positive: {self}")

    def channels(self, layer: LayerDesc) -> tuple[int, int]:
        """Channel tiles of a layer, clamped to its channels."""
        in_ch = 1 if layer.depthwise else layer.in_ch
        return min(self.tm or layer.out_ch, layer.out_ch), min(self.tn or in_ch, in_ch)


class Verdict(NamedTuple):
    """Result of an equivalence check; the first mismatch in NCHW order when failed."""
    passed: bool
    mismatch_index: Optional[tuple[int, int, int, int]] = None
    expected: Optional[float] = None
    actual: Optional[float] = None


def verify_equivalence(actual: Tensor4D, expected: Tensor4D) -> Verdict:
    """
    Bit-exact comparison of two tensors.

    Raises:
        ValueError: The tensors differ in dimensions or format.
    """
    if actual.dims != expected.dims:
        raise ValueError(f"Cannot compare tensors of dimensions {actual.dims} and {expected.dims}")
    if actual.fmt != expected.fmt:
        raise ValueError(f"Cannot compare tensors of formats {actual.fmt} and {expected.fmt}")
    different = np.argwhere(actual.data != expected.data)
    if not len(different):
        return Verdict(True)
    index = tuple(int(i) for i in different[0])
    logging.info("Tensors differ at %s: %s != %s", index, actual.data[index], expected.data[index])
    return Verdict(False, index, expected.data[index].item(), actual.data[index].item())


def _desc(map_id: str, rows: tuple[int, int], cols: tuple[int, int],
          channels: Optional[slice] = None) -> str:
    text = f"{map_id}[{rows[0]}:{rows[1]},{cols[0]}:{cols[1]}]"
    if channels is not None:
        text += f"@{channels.start}:{channels.stop}"
    return text


def _ranges(extent: int, size: int) -> list[tuple[int, int]]:
    return [(start, min(start + size, extent)) for start in range(0, extent, size)]


def _slices(extent: int, size: int) -> list[slice]:
    return [slice(start, stop) for start, stop in _ranges(extent, size)]


def _source_index(index: np.ndarray, extent: int, mode: PadMode) -> tuple[np.ndarray, np.ndarray]:
    """
    Source coordinates of padded coordinates, and which of them hold data.

    Raises:
        ValueError: Reflect padding reaches past a single mirror image, as in
          `tensors.pad`.
    """
    if mode == PadMode.REFLECT:
        if index.size and (index.min() <= -extent or index.max() >= 2 * extent - 1):
            raise ValueError(f"Reflect padding [{index.min()}, {index.max()}] too large "
                             f"for extent {extent}")
        index = np.abs(index)
        index = np.where(index >= extent, 2 * (extent - 1) - index, index)
        return index, np.ones(index.shape, dtype=bool)
    valid = (index >= 0) & (index < extent)
    clipped = np.clip(index, 0, extent - 1)
    if mode == PadMode.ZERO:
        return clipped, valid
    return clipped, np.ones(index.shape, dtype=bool)


# pylint: disable=too-many-arguments
def _gather(data: np.ndarray, origin: tuple[int, int], rows: np.ndarray, cols: np.ndarray,
            extent: tuple[int, int], mode: PadMode) -> np.ndarray:
    """
    Values of a (c, h, w) map at padded coordinates, read from `data`, which
    holds the map from row and column `origin` on.
    """
    src_rows, ok_rows = _source_index(rows, extent[0], mode)
    src_cols, ok_cols = _source_index(cols, extent[1], mode)
    values = data[:, src_rows - origin[0]][:, :, src_cols - origin[1]]
    if mode == PadMode.ZERO:
        values = values * (ok_rows[:, None] & ok_cols[None, :])
    return values


class _Piece(NamedTuple):
    data: Optional[np.ndarray]
    shape: tuple[int, int, int]
    desc: str

    def bits(self, bits: int) -> int:
        return math.prod(self.shape) * bits


class _Machine:
    """Buffers, trace and traffic of one simulation."""

    def __init__(self, buffers: Sequence[BufferState], keep_events: bool):
        self.buffers = {buffer.name: buffer for buffer in buffers}
        self.trace = PhaseTrace(keep_events=keep_events)
        self.traffic = TrafficReport()

    # pylint: disable=too-many-arguments
    def _put(self, kind: EventKind, buffer: str, tensor: str, bits: int, layer: Optional[str],
             block: Optional[tuple[int, int]], sources: Sequence[str], keep: bool) -> None:
        step = self.trace.record(kind, layer, block, buffer, bits, tensor, sources)
        state = self.buffers[buffer]
        if keep:
            state.add(tensor, bits, step)
        else:
            state.fill(tensor, bits, step)

    def load(self, buffer: str, tensor: str, bits: int, layer: Optional[str] = None,
             block: Optional[tuple[int, int]] = None, keep: bool = False) -> None:
        """Bring a tensor from DRAM into a buffer."""
        self._put(EventKind.LOAD, buffer, tensor, bits, layer, block, (), keep)

    def compute(self, buffer: str, tensor: str, bits: int, layer: str,
                block: Optional[tuple[int, int]], sources: Sequence[str]) -> None:
        """Produce a tensor into a buffer."""
        self._put(EventKind.COMPUTE, buffer, tensor, bits, layer, block, sources, False)

    def swap(self, buffer: str, tensor: str, bits: int, sources: Sequence[str],
             layer: Optional[str] = None, block: Optional[tuple[int, int]] = None,
             keep: bool = False) -> None:
        """Move or copy on-chip data into a buffer."""
        self._put(EventKind.SWAP, buffer, tensor, bits, layer, block, sources, keep)

    def store(self, buffer: str, tensor: str, bits: int, layer: str,
              block: Optional[tuple[int, int]]) -> None:
        """Send a tensor from a buffer off chip or to the boundary region."""
        self.trace.record(EventKind.STORE, layer, block, buffer, bits, tensor)

    def reserve(self, buffer: str, tensor: str, bits: int) -> None:
        """Hold room for a tensor without an event."""
        self.buffers[buffer].add(tensor, bits, self.trace.steps)

    def release(self, buffer: str, tensor: str) -> None:
        """Free the room of a tensor."""
        self.buffers[buffer].remove(tensor)

    def clear(self, buffer: str) -> None:
        """Empty a buffer."""
        self.buffers[buffer].clear()


class _Runner:
    """Arithmetic and bookkeeping shared by both dataflows."""

    def __init__(self, net: NetworkDesc, x: Optional[Tensor4D],
                 params: Optional[dict[str, LayerParams]], seed: int,
                 buffers: Sequence[BufferState], keep_events: bool):
        if x is not None:
            expected = (1,) + tuple(net.input_shape)
            if x.dims != expected:
                raise ValueError(f"Input of dimensions {x.dims}, network expects {expected}")
            if x.fmt != net.activation_format:
                raise ValueError(f"Input format {x.fmt}, network expects {net.activation_format}")
            params = params if params is not None else init_params(net, seed)
        self.net = net
        self.x = x
        self.params = params
        self.fmt = net.activation_format
        self.wfmt = net.weight_format
        self.shapes_only = x is None
        self.machine = _Machine(buffers, keep_events)
        self.maps: dict[str, Optional[np.ndarray]] = {INPUT_ID: None if x is None else x.data[0]}

    @property
    def traffic(self) -> TrafficReport:
        return self.machine.traffic

    def map_bits(self, layer_id: str, bits: int) -> int:
        shape = self.net.input_shape if layer_id == INPUT_ID else self.net.shape(layer_id)
        return math.prod(shape) * bits

    def new_map(self, layer_id: str) -> Optional[np.ndarray]:
        if self.shapes_only:
            return None
        return np.zeros(self.net.shape(layer_id), dtype=self.fmt.dtype)

    @staticmethod
    def chunks(layer: LayerDesc, m: slice, tn: int) -> list[tuple[slice, slice]]:
        """(input-data channels, weight input channels) of every input-channel chunk."""
        if layer.depthwise:
            return [(m, slice(0, 1))]
        return [(n, n) for n in _slices(layer.in_ch, tn)]

    def accumulate(self, layer: LayerDesc, padded: np.ndarray, m: slice,
                   weight_in: slice) -> np.ndarray:
        weights = Tensor4D(self.params[layer.id].weights.data[m, weight_in], self.wfmt)
        return conv2d_accumulate(Tensor4D(padded[None], self.fmt), weights, stride=layer.stride,
                                 depthwise=layer.depthwise)

    def requantize(self, layer: LayerDesc, acc: np.ndarray, m: slice) -> np.ndarray:
        bias = self.params[layer.id].bias
        return requantize(acc, self.fmt, self.wfmt, self.fmt,
                          None if bias is None else bias[m], layer.relu).data[0]

    def pool(self, layer: LayerDesc, data: np.ndarray) -> np.ndarray:
        return maxpool2d(Tensor4D(data[None], self.fmt), layer.k, layer.stride).data[0]

    def add(self, layer: LayerDesc, data: np.ndarray, operand: np.ndarray) -> np.ndarray:
        return eltwise_add(Tensor4D(data[None], self.fmt), Tensor4D(operand[None], self.fmt),
                           relu=layer.relu).data[0]

    def result(self) -> SimulationResult:
        compute = self.net.compute_layers
        output = None
        if not self.shapes_only:
            output = (Tensor4D(self.maps[compute[-1].id][None], self.fmt) if compute
                      else self.x)
        buffers = self.machine.buffers.values()
        return SimulationResult(output, self.machine.traffic, self.machine.trace,
                                {b.name: b.peak_bits for b in buffers},
                                {b.name: b.capacity_bits for b in buffers})


def _input_window(start: int, stop: int, k: int, stride: int, lead: int) -> tuple[int, int]:
    """Padded input coordinates [a, b) read by outputs [start, stop)."""
    return start * stride - lead, (stop - 1) * stride - lead + k


def _clip(window: tuple[int, int], extent: int) -> tuple[int, int]:
    return max(window[0], 0), min(window[1], extent)


class _BaselineRun(_Runner):
    """Layer-by-layer tiled execution."""

    # pylint: disable=too-many-arguments
    def __init__(self, net: NetworkDesc, x: Optional[Tensor4D], tiling: Tiling,
                 params: Optional[dict[str, LayerParams]], halo: bool, double_buffer: bool,
                 fuse_epilogue: bool, fused_stem: int,
                 capacities: Optional[dict[str, int]], keep_events: bool, seed: int):
        capacities = capacities or {}
        buffers = [BufferState(role, name, capacities.get(name)) for role, name in (
            (BufferRole.INPUT, "input"), (BufferRole.INTERMEDIATE_1, "stem"),
            (BufferRole.EXTRA, "residual"), (BufferRole.OUTPUT, "output"),
            (BufferRole.WEIGHT, "weights"))]
        super().__init__(net, x, params, seed, buffers, keep_events)
        self.tiling = tiling
        self.halo = halo
        self.input_copies = 2 if double_buffer else 1
        self.fuse_epilogue = fuse_epilogue
        self.fused_stem = fused_stem
        self.bits = self.fmt.bitwidth
        self.wbits = self.wfmt.bitwidth
        compute = net.compute_layers
        self.last = compute[-1].id if compute else INPUT_ID

    def run(self) -> SimulationResult:
        layers = self.net.compute_layers
        stem = self._stem(layers)
        index = len(stem)
        while index < len(layers):
            layer = layers[index]
            if layer.is_conv:
                epilogue = self._epilogue(layers, index) if self.fuse_epilogue else []
                self._conv(layer, stem if index == len(stem) else [], epilogue)
                index += 1 + len(epilogue)
            else:
                self._standalone(layer)
                index += 1
        return self.result()

    def _stem(self, layers: list[LayerDesc]) -> list[LayerDesc]:
        count = self.fused_stem
        if count < 0:
            raise ValueError(f"Invalid fused stem length {count}")
        if count == 0:
            return []
        if len(layers) <= count or not all(layer.is_conv for layer in layers[:count + 1]):
            raise ValueError(f"A fused stem of {count} needs {count + 1} leading convolutions")
        for layer, following in zip(layers[:count], layers[1:count + 1]):
            if self.net.consumers(layer.id) != [following.id]:
                raise ValueError(f"{layer.id}: output used outside the fused stem")
        return layers[:count]

    def _tile(self, layer: LayerDesc) -> tuple[int, int]:
        _channels, rows, cols = self.net.shape(layer.id)
        if layer.is_conv and ((self.tiling.tr < layer.k and self.tiling.tr < rows)
                              or (self.tiling.tc < layer.k and self.tiling.tc < cols)):
            raise ValueError(f"{layer.id}: tile {self.tiling.tr}x{self.tiling.tc} smaller "
                             f"than kernel {layer.k}")
        return min(self.tiling.tr, rows), min(self.tiling.tc, cols)

    def _epilogue(self, layers: list[LayerDesc], index: int) -> list[LayerDesc]:
        """Sum and pooling folded into the output stage of a convolution."""
        tr, tc = self._tile(layers[index])
        result: list[LayerDesc] = []
        previous = layers[index]
        for layer in layers[index + 1:index + 3]:
            if self.net.consumers(previous.id) != [layer.id]:
                break
            if layer.kind == LayerKind.ELTWISE_ADD and not result:
                if layer.residual_source == previous.id:
                    break
            elif layer.kind == LayerKind.MAXPOOL:
                if layer.k != layer.stride or tr % layer.k or tc % layer.k:
                    break
            else:
                break
            result.append(layer)
            previous = layer
            if layer.kind == LayerKind.MAXPOOL:
                break
        return result

    def _load_weights(self, layer: LayerDesc, m: slice, weight_in: slice,
                      block: tuple[int, int]) -> str:
        desc = f"w:{layer.id}[{m.start}:{m.stop},{weight_in.start}:{weight_in.stop}]"
        bits = ((m.stop - m.start) * (weight_in.stop - weight_in.start)
                * layer.k * layer.k * self.wbits)
        self.machine.load("weights", desc, bits, layer.id, block)
        self.traffic.add(layer.id, "weights", bits)
        return desc

    def _stem_region(self, stem: list[LayerDesc], level: int, rows: tuple[int, int],
                     cols: tuple[int, int], reads: list[int],
                     block: tuple[int, int]) -> _Piece:
        """Output of stem layer `level` over a region, recomputed from the input image."""
        net = self.net
        if level < 0:
            source = net.producer(stem[0].id).id
            channels = net.input_of(stem[0].id)[0]
            shape = (channels, rows[1] - rows[0], cols[1] - cols[0])
            desc = _desc(source, rows, cols)
            bits = math.prod(shape) * self.bits
            self.machine.load("input", desc, bits * self.input_copies, stem[0].id, block)
            reads[0] += bits
            data = None if self.shapes_only else self.maps[source][:, rows[0]:rows[1],
                                                                   cols[0]:cols[1]]
            return _Piece(data, shape, desc)
        layer = stem[level]
        _channels, height, width = net.input_of(layer.id)
        top, _bottom, left, _right = layer.padding
        row_window = _input_window(*rows, layer.k, layer.stride, top)
        col_window = _input_window(*cols, layer.k, layer.stride, left)
        src_rows, src_cols = _clip(row_window, height), _clip(col_window, width)
        source = self._stem_region(stem, level - 1, src_rows, src_cols, reads, block)
        everything = slice(0, layer.out_ch)
        weight_desc = self._load_weights(layer, everything, slice(0, 1 if layer.depthwise
                                                                  else layer.in_ch), block)
        data = None
        if not self.shapes_only:
            padded = _gather(source.data, (src_rows[0], src_cols[0]), np.arange(*row_window),
                             np.arange(*col_window), (height, width), layer.pad_mode)
            acc = self.accumulate(layer, padded, everything,
                                  slice(0, 1 if layer.depthwise else layer.in_ch))
            data = self.requantize(layer, acc, everything)
        piece = _Piece(data, (layer.out_ch, rows[1] - rows[0], cols[1] - cols[0]),
                       _desc(layer.id, rows, cols))
        self.machine.compute("stem", piece.desc, piece.bits(self.bits), layer.id, block,
                             (source.desc, weight_desc))
        return piece

    # pylint: disable=too-many-locals, too-many-statements
    def _conv(self, conv: LayerDesc, stem: list[LayerDesc], epilogue: list[LayerDesc]) -> None:
        net = self.net
        out_ch, out_rows, out_cols = net.shape(conv.id)
        tr, tc = self._tile(conv)
        tm, tn = self.tiling.channels(conv)
        reader = stem[0].id if stem else conv.id
        source = net.producer(reader).id
        _channels, height, width = net.input_of(conv.id)
        top, _bottom, left, _right = conv.padding
        final = epilogue[-1] if epilogue else conv
        store_column = "output" if final.id == self.last else "intermediate_write"
        result = self.new_map(final.id)
        reads = [0, 0]
        logging.debug("Baseline %s: tiles %dx%d, channel tiles %dx%d%s", conv.id, tr, tc, tm, tn,
                      f", epilogue {[layer.id for layer in epilogue]}" if epilogue else "")
        for rows in _ranges(out_rows, tr):
            for cols in _ranges(out_cols, tc):
                block = (rows[0], cols[0])
                row_window = _input_window(*rows, conv.k, conv.stride, top)
                col_window = _input_window(*cols, conv.k, conv.stride, left)
                in_rows, in_cols = _clip(row_window, height), _clip(col_window, width)
                region = None
                if stem:
                    region = self._stem_region(stem, len(stem) - 1, in_rows, in_cols, reads,
                                               block)
                for m_index, m in enumerate(_slices(out_ch, tm)):
                    acc = None
                    tile_desc = _desc(conv.id, rows, cols, m)
                    tile_shape = (m.stop - m.start, rows[1] - rows[0], cols[1] - cols[0])
                    for data_ch, weight_in in self.chunks(conv, m, tn):
                        if region is not None:
                            in_desc = region.desc
                            data = region.data
                        else:
                            in_desc = _desc(source, in_rows, in_cols, data_ch)
                            bits = ((data_ch.stop - data_ch.start) * (in_rows[1] - in_rows[0])
                                    * (in_cols[1] - in_cols[0]) * self.bits)
                            self.machine.load("input", in_desc, bits * self.input_copies,
                                              conv.id, block)
                            reads[0 if m_index == 0 else 1] += bits
                            data = self.maps[source]
                        weight_desc = self._load_weights(conv, m, weight_in, block)
                        if not self.shapes_only:
                            origin = (in_rows[0], in_cols[0]) if region is not None else (0, 0)
                            padded = _gather(data[data_ch], origin, np.arange(*row_window),
                                             np.arange(*col_window), (height, width),
                                             conv.pad_mode)
                            part = self.accumulate(conv, padded, m, weight_in)
                            acc = part if acc is None else acc + part
                        self.machine.compute("output", tile_desc,
                                             math.prod(tile_shape) * self.bits, conv.id, block,
                                             (in_desc, weight_desc))
                    tile = None if self.shapes_only else self.requantize(conv, acc, m)
                    self._finish_tile(epilogue, tile, tile_shape, tile_desc, rows, cols, m,
                                      block, final, store_column, result)
        self.maps[final.id] = result
        map_bits = self.map_bits(source, self.bits)
        self.traffic.add(reader, "input_image" if source == INPUT_ID else "intermediate_read",
                         map_bits)
        if self.halo:
            self.traffic.add(reader, "halo", max(0, reads[0] - map_bits))
        self.traffic.add(conv.id, "reread", reads[1])

    # pylint: disable=too-many-arguments, too-many-locals
    def _finish_tile(self, epilogue: list[LayerDesc], tile: Optional[np.ndarray],
                     shape: tuple[int, int, int], desc: str, rows: tuple[int, int],
                     cols: tuple[int, int], m: slice, block: tuple[int, int],
                     final: LayerDesc, store_column: str,
                     result: Optional[np.ndarray]) -> None:
        """Apply the epilogue to an output tile and write it."""
        for layer in epilogue:
            if layer.kind == LayerKind.ELTWISE_ADD:
                source = layer.residual_source
                operand_desc = _desc(source, rows, cols, m)
                bits = math.prod(shape) * self.bits
                self.machine.load("residual", operand_desc, bits, layer.id, block)
                self.traffic.add(layer.id, "residual", bits)
                if tile is not None:
                    tile = self.add(layer, tile,
                                    self.maps[source][m, rows[0]:rows[1], cols[0]:cols[1]])
                sources = (desc, operand_desc)
            else:
                rows, cols = (rows[0] // layer.k, rows[1] // layer.k), (cols[0] // layer.k,
                                                                       cols[1] // layer.k)
                shape = (shape[0], rows[1] - rows[0], cols[1] - cols[0])
                if tile is not None:
                    tile = self.pool(layer, tile)
                sources = (desc,)
            desc = _desc(layer.id, rows, cols, m)
            self.machine.compute("output", desc, math.prod(shape) * self.bits, layer.id, block,
                                 sources)
        bits = math.prod(shape) * self.bits
        self.machine.store("output", desc, bits, final.id, block)
        self.traffic.add(final.id, store_column, bits)
        if result is not None:
            result[m, rows[0]:rows[1], cols[0]:cols[1]] = tile

    def _standalone(self, layer: LayerDesc) -> None:
        """A pooling or a sum that reads its input from DRAM and writes its output back."""
        net = self.net
        channels, out_rows, out_cols = net.shape(layer.id)
        source = net.producer(layer.id).id
        tr, tc = self._tile(layer)
        column = "output" if layer.id == self.last else "intermediate_write"
        result = self.new_map(layer.id)
        everything = slice(0, channels)
        reads = 0
        for rows in _ranges(out_rows, tr):
            for cols in _ranges(out_cols, tc):
                block = (rows[0], cols[0])
                if layer.kind == LayerKind.MAXPOOL:
                    in_rows = _input_window(*rows, layer.k, layer.stride, 0)
                    in_cols = _input_window(*cols, layer.k, layer.stride, 0)
                else:
                    in_rows, in_cols = rows, cols
                in_desc = _desc(source, in_rows, in_cols)
                bits = channels * (in_rows[1] - in_rows[0]) * (in_cols[1] - in_cols[0]) * self.bits
                self.machine.load("input", in_desc, bits * self.input_copies, layer.id, block)
                reads += bits
                sources = [in_desc]
                data = None
                if not self.shapes_only:
                    data = self.maps[source][:, in_rows[0]:in_rows[1], in_cols[0]:in_cols[1]]
                out_bits = channels * (rows[1] - rows[0]) * (cols[1] - cols[0]) * self.bits
                if layer.kind == LayerKind.ELTWISE_ADD:
                    operand_desc = _desc(layer.residual_source, rows, cols)
                    self.machine.load("residual", operand_desc, out_bits, layer.id, block)
                    self.traffic.add(layer.id, "residual", out_bits)
                    sources.append(operand_desc)
                    if data is not None:
                        operand = self.maps[layer.residual_source]
                        data = self.add(layer, data,
                                        operand[:, rows[0]:rows[1], cols[0]:cols[1]])
                elif data is not None:
                    data = self.pool(layer, data)
                out_desc = _desc(layer.id, rows, cols)
                self.machine.compute("output", out_desc, out_bits, layer.id, block, sources)
                self.machine.store("output", out_desc, out_bits, layer.id, block)
                self.traffic.add(layer.id, column, out_bits)
                if result is not None:
                    result[everything, rows[0]:rows[1], cols[0]:cols[1]] = data
        self.maps[layer.id] = result
        map_bits = self.map_bits(source, self.bits)
        self.traffic.add(layer.id, "input_image" if source == INPUT_ID else "intermediate_read",
                         map_bits)
        if self.halo:
            self.traffic.add(layer.id, "halo", max(0, reads - map_bits))


# pylint: disable=too-many-arguments
def simulate_baseline(net: NetworkDesc, x: Optional[Tensor4D], tiling: Tiling,
                      params: Optional[dict[str, LayerParams]] = None, halo: bool = True,
                      double_buffer: bool = True, fuse_epilogue: bool = True,
                      fused_stem: int = 0, capacities: Optional[dict[str, int]] = None,
                      record_trace: bool = True, seed: int = 0) -> SimulationResult:
    """
    Simulate the tiled, layer-by-layer accelerator.

    Every convolution iterates over output tiles (T_r, T_c), output-channel
    tiles T_m and input-channel tiles T_n; each phase reads a halo-extended
    input tile and a weight chunk, and each output tile is written back.

    Args:
        net: The network.
        x: Network input, or None for shapes-only mode.
        tiling: Tile sizes.
        params: Layer parameters (default: `init_params(net, seed)`).
        halo: Report the extra bits of overlapping input tiles.
        double_buffer: Reserve two input tiles in the input buffer.
        fuse_epilogue: Fold sums and non-overlapping poolings that follow a
          convolution into its output stage.
        fused_stem: Number of leading convolutions computed inside the tiles
          of the next convolution, with recomputed halos; their outputs never
          leave the chip.
        capacities: Capacity of buffers input, stem, residual, output and weights
          (default: unbounded).
        record_trace: Keep the trace events.
        seed: Seed of the default parameters.

    Raises:
        ValueError: A tile is smaller than a kernel, or the input does not fit the network.
        BufferOverflowError: A buffer exceeds its capacity.
    """
    run = _BaselineRun(net, x, tiling, params, halo, double_buffer, fuse_epilogue, fused_stem,
                       capacities, record_trace, seed)
    result = run.run()
    logging.info("Baseline simulation of %s: %.2f Mbits of feature-map traffic, %d steps",
                 net.name, result.traffic.fmap_bits / MBIT, len(result.trace))
    return result


def _check_plan(net: NetworkDesc, plan: FusionPlan, blocking: BlockingPlan) -> None:
    """Raise PlanMismatchError unless `blocking` realises `plan` on `net`."""
    check_groups(net, plan.groups)
    if not len(plan.groups) == len(plan.styles) == len(plan.group_tiles):
        raise PlanMismatchError("Plan has inconsistent numbers of groups, styles and tiles")
    for group in plan.groups:
        for layer_id in group:
            if layer_id not in blocking:
                raise PlanMismatchError(f"{layer_id}: no blocking")
            layer, layer_blocking = net.layer(layer_id), blocking[layer_id]
            _channels, rows, cols = net.input_of(layer_id)
            grid = layer_blocking.grid
            if (grid.height, grid.width) != (rows, cols):
                raise PlanMismatchError(f"{layer_id}: grid of {grid.height}x{grid.width} "
                                        f"for a {rows}x{cols} input")
            declared = plan.tile_sizes.get(layer_id)
            if declared is not None and tuple(declared) != grid.max_block:
                raise PlanMismatchError(f"{layer_id}: blocks of {grid.max_block}, "
                                        f"plan declares {tuple(declared)}")
            if layer.is_conv and (layer_blocking.padding is None
                                  or layer_id not in plan.channel_tiles):
                raise PlanMismatchError(f"{layer_id}: missing block padding or channel tiles")


class _FusedRun(_Runner):  # pylint: disable=too-many-instance-attributes
    """Depth-first block execution of fused groups."""

    # pylint: disable=too-many-arguments
    def __init__(self, net: NetworkDesc, x: Optional[Tensor4D], plan: FusionPlan,
                 blocking: Optional[BlockingPlan], params: Optional[dict[str, LayerParams]],
                 capacities: Optional[dict[str, int]], keep_events: bool, seed: int):
        blocking = blocking if blocking is not None else blocking_from_plan(net, plan)
        _check_plan(net, plan, blocking)
        declared = plan.buffer_alloc.buffers()
        if capacities is None:
            capacities = {name: bits for _role, name, bits in declared}
        buffers = [BufferState(BufferRole(role), name, capacities.get(name))
                   for role, name, _bits in declared]
        super().__init__(net, x, params, seed, buffers, keep_events)
        self.plan = plan
        self.blocking = blocking
        self.bits = plan.activation_bits
        self.wbits = plan.weight_bits
        self.exported = boundary_maps(net, plan.groups)
        self.final = plan.groups[-1][-1] if plan.groups else INPUT_ID
        self.location: dict[str, str] = {INPUT_ID: "dram"}
        self.skip: dict[str, _Piece] = {}
        self.group: tuple[str, ...] = ()
        self.stages: list[Stage] = []
        self.residuals = None
        self.weights_resident = True
        self.preloaded = False

    def run(self) -> SimulationResult:
        layer_ids = [lid for group in self.plan.groups for lid in group]
        self.preloaded = self._load_resident_weights(layer_ids)
        if self.preloaded:
            logging.debug("Fused run: all weights loaded once")
        for index, group in enumerate(self.plan.groups):
            self._group(group)
            for map_id, (_first, last) in self.exported.items():
                if last == index and self.location.get(map_id) == "boundary":
                    self.machine.release("boundary", map_id)
        return self.result()

    def _group(self, group: tuple[str, ...]) -> None:
        self.group = group
        self.stages = group_stages(group, self.blocking)
        self.residuals = residual_plan(self.net, group, self.stages, self.blocking, self.bits)
        self.weights_resident = self.preloaded or self._load_resident_weights(group)
        logging.debug("Fused group %s..%s: %d stage(s), weights %s", group[0], group[-1],
                      len(self.stages), "resident" if self.weights_resident else "streamed")
        for block in self.stages[-1].grid.blocks():
            self._feed(len(self.stages) - 1, block)

    def _load_resident_weights(self, layer_ids: Sequence[str]) -> bool:
        """Load the weights of `layer_ids` into the weight buffer if they all fit."""
        convs = [self.net.layer(lid) for lid in layer_ids if self.net.layer(lid).is_conv]
        total = sum(layer.weight_count for layer in convs) * self.wbits
        capacity = self.machine.buffers["weights"].capacity_bits
        if capacity is not None and total > capacity:
            return False
        self.machine.clear("weights")
        for layer in convs:
            bits = layer.weight_count * self.wbits
            self.machine.load("weights", f"w:{layer.id}", bits, layer.id, keep=True)
            self.traffic.add(layer.id, "weights", bits)
        return True

    def _copy_skip(self, sum_id: str, piece: _Piece) -> None:
        slot = self.residuals.slots[sum_id]
        self.machine.swap(f"skip_{slot}", piece.desc, piece.bits(self.bits), (piece.desc,),
                          layer=sum_id)
        self.skip[sum_id] = piece

    def _load_group_input(self, block: Block) -> _Piece:
        first = self.group[0]
        source = self.net.producer(first).id
        channels = self.net.input_of(first)[0]
        piece = _Piece(None if self.shapes_only
                       else self.maps[source][:, block.row_slice, block.col_slice],
                       (channels, block.height, block.width), _desc(source, block.rows, block.cols))
        bits = piece.bits(self.bits)
        if self.location[source] == "dram":
            self.traffic.add(first, "input_image" if source == INPUT_ID else "intermediate_read",
                             bits)
        if self.plan.prefetch:
            self.machine.load("intermediate_3", piece.desc, bits, first, block.index)
            self.machine.swap("input", piece.desc, bits, (piece.desc,), first, block.index)
        else:
            self.machine.load("input", piece.desc, bits, first, block.index)
        for sum_id in self.residuals.copy_after.get(source, []):
            self._copy_skip(sum_id, piece)
        return piece

    def _feed(self, stage_index: int, block: Block) -> _Piece:
        """Output of a stage for one of its input blocks, merging earlier blocks as needed."""
        stage = self.stages[stage_index]
        if stage_index == 0:
            return self._run_stage(stage, block.index, self._load_group_input(block), "input")
        previous = self.stages[stage_index - 1]
        last = previous.layers[-1]
        extra = f"extra_{stage_index - 1}"
        channels = self.net.shape(last)[0]
        data = None
        if not self.shapes_only:
            data = np.zeros((channels, block.height, block.width), dtype=self.fmt.dtype)
        self.machine.clear(extra)
        parts = []
        for sub in self.blocking[last].out_grid.blocks_within(block.rows, block.cols):
            part = self._feed(stage_index - 1, previous.grid.block(*sub.index))
            self.machine.swap(extra, part.desc, part.bits(self.bits), (part.desc,), last,
                              sub.index, keep=True)
            parts.append(part.desc)
            if data is not None:
                data[:, sub.rows[0] - block.rows[0]:sub.rows[1] - block.rows[0],
                     sub.cols[0] - block.cols[0]:sub.cols[1] - block.cols[0]] = part.data
        merged = _Piece(data, (channels, block.height, block.width),
                        _desc(last, block.rows, block.cols))
        self.machine.swap(extra, merged.desc, merged.bits(self.bits), parts, last, block.index)
        return self._run_stage(stage, block.index, merged, extra)

    def _run_stage(self, stage: Stage, index: tuple[int, int], piece: _Piece,
                   buffer: str) -> _Piece:
        current = piece
        for layer_id in stage.layers:
            layer = self.net.layer(layer_id)
            layer_blocking = self.blocking[layer_id]
            out_block = layer_blocking.out_grid.block(*index)
            target = "intermediate_2" if buffer == "intermediate_1" else "intermediate_1"
            sources = [current.desc]
            data = None
            if layer.is_conv:
                data = self._conv(layer, layer_blocking, index, current, sources)
            elif layer.kind == LayerKind.MAXPOOL:
                data = None if self.shapes_only else self.pool(layer, current.data)
            elif layer.kind == LayerKind.ELTWISE_ADD:
                operand = self._operand(layer, out_block)
                sources.append(operand.desc)
                data = None if self.shapes_only else self.add(layer, current.data, operand.data)
            else:
                data = current.data
            out = _Piece(data, (self.net.shape(layer_id)[0], out_block.height, out_block.width),
                         _desc(layer_id, out_block.rows, out_block.cols))
            self.machine.compute(target, out.desc, out.bits(self.bits), layer_id, index, sources)
            for sum_id in self.residuals.copy_after.get(layer_id, []):
                self._copy_skip(sum_id, out)
            if layer_id == self.final or layer_id in self.exported:
                self._store(layer_id, out_block, out, target)
            current, buffer = out, target
        return current

    def _conv(self, layer: LayerDesc, layer_blocking: LayerBlocking, index: tuple[int, int],
              current: _Piece, sources: list[str]) -> Optional[np.ndarray]:
        tm, tn = self.plan.channel_tiles[layer.id]
        if self.weights_resident:
            sources.append(f"w:{layer.id}")
        padded = None
        if not self.shapes_only:
            top, bottom, left, right = layer_blocking.padding.for_block(*index)
            _channels, height, width = current.shape
            padded = _gather(current.data, (0, 0), np.arange(-top, height + bottom),
                             np.arange(-left, width + right), (height, width),
                             layer_blocking.padding.mode)
        outputs = []
        for m in _slices(layer.out_ch, tm):
            acc = None
            for data_ch, weight_in in self.chunks(layer, m, tn):
                if not self.weights_resident:
                    desc = f"w:{layer.id}[{m.start}:{m.stop},{weight_in.start}:{weight_in.stop}]"
                    bits = ((m.stop - m.start) * (weight_in.stop - weight_in.start)
                            * layer.k * layer.k * self.wbits)
                    self.machine.load("weights", desc, bits, layer.id, index)
                    self.traffic.add(layer.id, "weights", bits)
                    sources.append(desc)
                if padded is not None:
                    part = self.accumulate(layer, padded[data_ch], m, weight_in)
                    acc = part if acc is None else acc + part
            if padded is not None:
                outputs.append(self.requantize(layer, acc, m))
        return np.concatenate(outputs, axis=0) if outputs else None

    def _operand(self, layer: LayerDesc, out_block: Block) -> _Piece:
        """Residual operand of a sum for one block."""
        if self.residuals.routes[layer.id] == ResidualRoute.SKIP:
            return self.skip.pop(layer.id)
        source = layer.residual_source
        if source not in self.location:
            raise PlanMismatchError(f"{layer.id}: residual {source} is not available")
        piece = _Piece(None if self.shapes_only
                       else self.maps[source][:, out_block.row_slice, out_block.col_slice],
                       (self.net.shape(layer.id)[0], out_block.height, out_block.width),
                       _desc(source, out_block.rows, out_block.cols))
        bits = piece.bits(self.bits)
        if self.location[source] == "dram":
            self.traffic.add(layer.id, "residual", bits)
        self.machine.load(f"skip_{self.residuals.slots[layer.id]}", piece.desc, bits, layer.id,
                          out_block.index)
        return piece

    def _store(self, layer_id: str, out_block: Block, piece: _Piece, buffer: str) -> None:
        bits = piece.bits(self.bits)
        if layer_id == self.final:
            where, column = "dram", "output"
        elif self.plan.onchip_boundaries:
            where, column = "boundary", None
        else:
            where, column = "dram", "intermediate_write"
        if layer_id not in self.location:
            self.location[layer_id] = where
            self.maps[layer_id] = self.new_map(layer_id)
            if where == "boundary":
                self.machine.reserve("boundary", layer_id, self.map_bits(layer_id, self.bits))
        if column is not None:
            self.traffic.add(layer_id, column, bits)
        self.machine.store(buffer, piece.desc, bits, layer_id, out_block.index)
        if piece.data is not None:
            self.maps[layer_id][:, out_block.row_slice, out_block.col_slice] = piece.data


# pylint: disable=too-many-arguments
def simulate_fused(net: NetworkDesc, x: Optional[Tensor4D], plan: FusionPlan,
                   blocking: Optional[BlockingPlan] = None,
                   params: Optional[dict[str, LayerParams]] = None,
                   capacities: Optional[dict[str, int]] = None, record_trace: bool = True,
                   seed: int = 0) -> SimulationResult:
    """
    Simulate the fused block-convolution dataflow of a fusion plan.

    Within a group, every block of the group input runs through the layers
    back to back; outputs of pooled blocks merge in extra buffers before the
    next stage. Block padding is applied by address manipulation.

    Args:
        net: The network.
        x: Network input, or None for shapes-only mode.
        plan: The fusion plan.
        blocking: The blocking realising the plan (default: `blocking_from_plan`).
        params: Layer parameters (default: `init_params(net, seed)`).
        capacities: Buffer capacities (default: the plan's buffer allocation).
        record_trace: Keep the trace events.
        seed: Seed of the default parameters.

    Raises:
        PlanMismatchError: The plan or the blocking do not fit the network.
        BufferOverflowError: A buffer exceeds its capacity.
    """
    run = _FusedRun(net, x, plan, blocking, params, capacities, record_trace, seed)
    result = run.run()
    logging.info("Fused simulation of %s in %d group(s): %.2f Mbits of feature-map traffic, "
                 "%.2f Mbits intermediate", net.name, len(plan.groups),
                 result.traffic.fmap_bits / MBIT, result.traffic.intermediate_fmap / MBIT)
    return result


def traffic_frame(report: TrafficReport) -> DataFrame:
    """The per-layer table with a totals row."""
    frame = report.to_frame()
    totals = {column: report.total(column) for column in TRAFFIC_COLUMNS}
    return DataFrame([*frame.to_dict(orient="records"), {"layer": "total", **totals}],
                     columns=["layer", *TRAFFIC_COLUMNS])

