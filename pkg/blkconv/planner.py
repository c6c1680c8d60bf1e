"""
Layer-fusion planning.

A fusion plan partitions the layers of a network into groups of consecutive
layers. The layers of a group run block by block, depth first, without
moving intermediate feature maps off chip:

    - every group cuts its input into blocks of a start tile (T_r, T_c);
    - hierarchical groups keep the number of blocks, so blocks shrink after
      pooling; fixed groups keep the block size, so pooled blocks are merged
      in extra buffers before the next convolution ("stages");
    - two ping-pong intermediate buffers hold the blocks flowing between
      layers, skip buffers hold copies of residual operands;
    - group outputs either stay on chip in a boundary region or are spilled
      to DRAM.

Plans are scored with a cycle model, where a phase processes one
(T_r, T_c, T_m, T_n) tile on `n_pe` PEs:

    phases = ceil(M/T_m) * ceil(N/T_n) * ceil(R/T_r) * ceil(C/T_c)
    cycles = phases * (T_r + k - 1) * (T_c + k - 1) * T_m / n_pe

and an on-chip memory model that rounds every buffer up to whole BRAM blocks.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from enum import Enum
import itertools
import json
import logging
import math
from typing import Iterable, Optional, Sequence, Union

import yaml
from pandas import DataFrame

from .blocking import (BlockGrid, BlockingPlan, InfeasibleBlockingError, LayerBlocking,
                       layer_blocking)
from .networks import LayerDesc, LayerKind, NetworkDesc
from .presets import budget_path
from .tensors import PadMode, ScalarFormat


BRAM_18K_BITS = 18 * 1024


class EnumerationCapError(ValueError):
    """Too many groupings or plans to enumerate."""


class PlanMismatchError(ValueError):
    """A fusion plan is inconsistent with a network or a blocking plan."""


class GroupStyle(Enum):
    """How blocks evolve inside a fused group."""
    HIERARCHICAL = "hierarchical"
    FIXED = "fixed"

    @property
    def code(self) -> str:
        """One-letter code."""
        return "H" if self == GroupStyle.HIERARCHICAL else "F"

    @classmethod
    def parse(cls, text: Union[str, GroupStyle]) -> GroupStyle:
        """Parse a style from its name or its one-letter code."""
        if isinstance(text, GroupStyle):
            return text
        for style in cls:
            if text.lower() in (style.value, style.code.lower()):
                return style
        raise ValueError(f"Invalid group style: {text}")


@dataclass(frozen=True)
class HardwareBudget:
    """
    Resources of the target accelerator.

    Attributes:
        bram_bits: on-chip memory capacity
        n_pe: number of parallel PEs
        activation_bits: bits per activation of real-valued networks
        weight_buffer_bits: capacity reserved for weights; 0 means channel
          tiles are not limited by the weight buffer
        bram_block_bits: BRAM allocation granularity
        max_tm: largest output-channel tile
        max_tn: largest input-channel tile
        name: budget name
    """
    bram_bits: int
    n_pe: int = 1
    activation_bits: int = 8
    weight_buffer_bits: int = 0
    bram_block_bits: int = BRAM_18K_BITS
    max_tm: Optional[int] = None
    max_tn: Optional[int] = None
    name: str = "custom"

    def __post_init__(self):
        if self.bram_bits < 0 or self.weight_buffer_bits < 0:
            raise ValueError("Memory capacities must be non-negative")
        if min(self.n_pe, self.activation_bits, self.bram_block_bits) <= 0:
            raise ValueError("PE count, activation bits and BRAM block size must be positive")
        if any(limit is not None and limit <= 0 for limit in (self.max_tm, self.max_tn)):
            raise ValueError("Channel tile limits must be positive")

    @property
    def bram_blocks(self) -> int:
        """Capacity in whole BRAM blocks."""
        return self.bram_bits // self.bram_block_bits

    @classmethod
    def from_dict(cls, content: dict) -> HardwareBudget:
        """
        Parse a budget description. Capacity is given either as `bram_bits`
        or as a number of `bram_blocks` of `bram_block_bits` each.
        """
        try:
            block_bits = int(content.get("bram_block_bits", BRAM_18K_BITS))
            if "bram_bits" in content:
                bram_bits = int(content["bram_bits"])
            else:
                bram_bits = int(content["bram_blocks"]) * block_bits
            limits = content.get("channel_limits") or {}
            return cls(bram_bits=bram_bits, n_pe=int(content.get("n_pe", 1)),
                       activation_bits=int(content.get("activation_bits", 8)),
                       weight_buffer_bits=int(content.get("weight_buffer_bits", 0)),
                       bram_block_bits=block_bits,
                       max_tm=limits.get("max_tm"), max_tn=limits.get("max_tn"),
                       name=str(content.get("name", "custom")))
        except KeyError as error:
            raise ValueError(f"Missing budget field {error}") from error
        except (AttributeError, TypeError) as error:
            raise ValueError(f"Invalid budget: {error}") from error


def load_budget(choice: Union[int, str]) -> HardwareBudget:
    """
    Read a hardware budget YAML (or JSON) file.

    Args:
        choice: The number or name of a packaged budget, or a path.
    """
    path = budget_path(choice)
    with open(path, "r", encoding="utf-8") as file:
        budget = HardwareBudget.from_dict(yaml.safe_load(file))
    logging.info("Hardware budget %s: %d BRAM blocks, %d PEs",
                 budget.name, budget.bram_blocks, budget.n_pe)
    return budget


@dataclass(frozen=True)
class ConvGeometry:
    """Output-side dimensions of a convolution: M, N_ch, R, C and k."""
    out_ch: int
    in_ch: int
    rows: int
    cols: int
    k: int
    depthwise: bool = False

    @classmethod
    def of_layer(cls, net: NetworkDesc, layer_id: str) -> ConvGeometry:
        """Geometry of a convolution layer of `net`."""
        layer = net.layer(layer_id)
        out_ch, rows, cols = net.shape(layer_id)
        return cls(out_ch, layer.in_ch, rows, cols, layer.k, layer.depthwise)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def phase_count(geom: ConvGeometry, tr: int, tc: int, tm: int, tn: int) -> int:
    """Number of (T_r, T_c, T_m, T_n) phases; depthwise layers have one input channel per output."""
    in_ch = 1 if geom.depthwise else geom.in_ch
    return (_ceil_div(geom.out_ch, tm) * _ceil_div(in_ch, tn)
            * _ceil_div(geom.rows, tr) * _ceil_div(geom.cols, tc))


# pylint: disable=too-many-arguments
def estimate_cycles(geom: ConvGeometry, tr: int, tc: int, tm: int, tn: int, n_pe: int) -> int:
    """
    Latency of a convolution in cycles:
    `ceil(phases * (T_r + k - 1) * (T_c + k - 1) * T_m / n_pe)`.
    """
    if min(tr, tc, tm, tn, n_pe) <= 0:
        raise ValueError(f"Tile sizes and PE count must be positive: {(tr, tc, tm, tn, n_pe)}")
    work = phase_count(geom, tr, tc, tm, tn) * (tr + geom.k - 1) * (tc + geom.k - 1) * tm
    return _ceil_div(work, n_pe)


def word_bits(fmt: ScalarFormat, default: int) -> int:
    """Bits per value: the format's bitwidth for fixed formats, else `default`."""
    return fmt.bitwidth if fmt.is_fixed else default


def _divisors(n: int) -> list[int]:
    return [d for d in range(n, 0, -1) if n % d == 0]


def channel_tiles(layer: LayerDesc, budget: HardwareBudget, weight_bits: int) -> tuple[int, int]:
    """
    Channel tiles (T_m, T_n) of a convolution: full channels if they fit,
    else the largest divisors within the budget's tile limits whose weight
    chunk fits the weight buffer.

    Raises:
        InfeasibleBlockingError: Not even a single filter fits the weight buffer.
    """
    out_ch = layer.out_ch
    in_ch = 1 if layer.depthwise else layer.in_ch
    max_tm = min(out_ch, budget.max_tm or out_ch)
    max_tn = min(in_ch, budget.max_tn or in_ch)
    best = None
    for tn in _divisors(in_ch):
        if tn > max_tn:
            continue
        for tm in _divisors(out_ch):
            if tm > max_tm:
                continue
            chunk = tm * tn * layer.k * layer.k * weight_bits
            if budget.weight_buffer_bits and chunk > budget.weight_buffer_bits:
                continue
            if best is None or tm * tn > best[0] * best[1]:
                best = (tm, tn)
            break
    if best is None:
        raise InfeasibleBlockingError("No channel tile fits the weight buffer", layer.id)
    return best


@dataclass(frozen=True)
class BufferAlloc:
    """
    Capacities of the on-chip buffers of a fused dataflow, in bits.

    Attributes:
        input_bits: blocks loaded at the start of a group
        intermediate_bits: each of the two ping-pong intermediate buffers
        prefetch_bits: third intermediate buffer prefetching the next input block
        extra_bits: merge buffers, one per stage transition
        skip_bits: skip buffers holding residual operands
        boundary_bits: region keeping group outputs on chip
        weight_bits: weight buffer
    """
    input_bits: int = 0
    intermediate_bits: int = 0
    prefetch_bits: int = 0
    extra_bits: tuple[int, ...] = ()
    skip_bits: tuple[int, ...] = ()
    boundary_bits: int = 0
    weight_bits: int = 0

    def buffers(self) -> list[tuple[str, str, int]]:
        """All buffers as (role, name, capacity_bits)."""
        result = [("input", "input", self.input_bits),
                  ("intermediate_1", "intermediate_1", self.intermediate_bits),
                  ("intermediate_2", "intermediate_2", self.intermediate_bits)]
        if self.prefetch_bits:
            result.append(("intermediate_3", "intermediate_3", self.prefetch_bits))
        result += [("extra", f"extra_{i}", bits) for i, bits in enumerate(self.extra_bits)]
        result += [("extra", f"skip_{i}", bits) for i, bits in enumerate(self.skip_bits)]
        if self.boundary_bits:
            result.append(("boundary", "boundary", self.boundary_bits))
        result.append(("weight", "weights", self.weight_bits))
        return result

    def bram_blocks(self, block_bits: int = BRAM_18K_BITS) -> int:
        """BRAM blocks used, every buffer rounded up to whole blocks."""
        return sum(_ceil_div(bits, block_bits) for _role, _name, bits in self.buffers())

    def onchip_bits(self, block_bits: int = BRAM_18K_BITS) -> int:
        """On-chip memory used, every buffer rounded up to whole BRAM blocks."""
        return self.bram_blocks(block_bits) * block_bits

    def to_dict(self) -> dict:
        """A JSON-serializable description."""
        return {"input": self.input_bits, "intermediate": self.intermediate_bits,
                "prefetch": self.prefetch_bits, "extra": list(self.extra_bits),
                "skip": list(self.skip_bits), "boundary": self.boundary_bits,
                "weights": self.weight_bits}

    @classmethod
    def from_dict(cls, content: dict) -> BufferAlloc:
        """Parse a buffer allocation description."""
        return cls(int(content.get("input", 0)), int(content.get("intermediate", 0)),
                   int(content.get("prefetch", 0)), tuple(content.get("extra", ())),
                   tuple(content.get("skip", ())), int(content.get("boundary", 0)),
                   int(content.get("weights", 0)))


Tile = tuple[int, int]


@dataclass(frozen=True)
class FusionPlan:  # pylint: disable=too-many-instance-attributes
    """
    A fusion plan.

    Attributes:
        groups: consecutive runs of layer ids covering all compute layers
        styles: blocking style of every group
        group_tiles: start tile (T_r, T_c) of every group
        tile_sizes: largest input block (rows, cols) of every grouped layer
        channel_tiles: (T_m, T_n) of every convolution
        buffer_alloc: on-chip buffer capacities
        onchip_boundaries: keep group outputs on chip instead of spilling them
        prefetch: use a third intermediate buffer to prefetch input blocks
        pad_mode: block padding mode (default: each layer's padding mode)
        activation_bits: bits per activation used for sizing
        weight_bits: bits per weight used for sizing
        plan_id: enumeration index
    """
    groups: tuple[tuple[str, ...], ...]
    styles: tuple[GroupStyle, ...]
    group_tiles: tuple[Tile, ...]
    tile_sizes: dict[str, Tile]
    channel_tiles: dict[str, Tile]
    buffer_alloc: BufferAlloc
    onchip_boundaries: bool = True
    prefetch: bool = False
    pad_mode: Optional[PadMode] = None
    activation_bits: int = 8
    weight_bits: int = 8
    plan_id: int = 0

    def group_of(self, layer_id: str) -> int:
        """Index of the group containing `layer_id`."""
        for index, group in enumerate(self.groups):
            if layer_id in group:
                return index
        raise PlanMismatchError(f"Layer {layer_id} is in no group")

    def describe(self, net: NetworkDesc) -> dict[str, str]:
        """Grouping (convolutions per group), styles and tiles as strings."""
        counts = [sum(1 for lid in group if net.layer(lid).is_conv) for group in self.groups]
        return {
            "grouping": "-".join(str(count) for count in counts),
            "styles": "|".join(style.code for style in self.styles),
            "tiles": "|".join(f"{tr}x{tc}" for tr, tc in self.group_tiles),
        }

    def to_dict(self) -> dict:
        """A JSON-serializable description."""
        return {
            "plan_id": self.plan_id,
            "groups": [list(group) for group in self.groups],
            "styles": [style.value for style in self.styles],
            "group_tiles": [list(tile) for tile in self.group_tiles],
            "tile_sizes": {lid: list(tile) for lid, tile in self.tile_sizes.items()},
            "channel_tiles": {lid: list(tile) for lid, tile in self.channel_tiles.items()},
            "buffer_alloc": self.buffer_alloc.to_dict(),
            "onchip_boundaries": self.onchip_boundaries,
            "prefetch": self.prefetch,
            "pad_mode": None if self.pad_mode is None else self.pad_mode.value,
            "activation_bits": self.activation_bits,
            "weight_bits": self.weight_bits,
        }

    @classmethod
    def from_dict(cls, content: dict) -> FusionPlan:
        """Parse a fusion plan description."""
        try:
            pad_mode = content.get("pad_mode")
            return cls(
                groups=tuple(tuple(group) for group in content["groups"]),
                styles=tuple(GroupStyle.parse(style) for style in content["styles"]),
                group_tiles=tuple(tuple(tile) for tile in content["group_tiles"]),
                tile_sizes={lid: tuple(tile) for lid, tile in content["tile_sizes"].items()},
                channel_tiles={lid: tuple(tile)
                               for lid, tile in content["channel_tiles"].items()},
                buffer_alloc=BufferAlloc.from_dict(content["buffer_alloc"]),
                onchip_boundaries=bool(content.get("onchip_boundaries", True)),
                prefetch=bool(content.get("prefetch", False)),
                pad_mode=None if pad_mode is None else PadMode(pad_mode),
                activation_bits=int(content.get("activation_bits", 8)),
                weight_bits=int(content.get("weight_bits", 8)),
                plan_id=int(content.get("plan_id", 0)))
        except (KeyError, TypeError, AttributeError) as error:
            raise ValueError(f"Invalid fusion plan: {error}") from error


def save_plan(plan: FusionPlan, file_path: str) -> None:
    """Write a fusion plan to a JSON file."""
    with open(file_path, "w", encoding="utf-8") as file:
        json.dump(plan.to_dict(), file, indent=2)
    logging.info("Written fusion plan to %s", file_path)


def load_plan(file_path: str) -> FusionPlan:
    """Read a fusion plan from a JSON file."""
    with open(file_path, "r", encoding="utf-8") as file:
        return FusionPlan.from_dict(yaml.safe_load(file))


@dataclass(frozen=True)
class PlanScore:
    """
    Score of a fusion plan.

    Attributes:
        cycles: latency by the cycle model
        onchip_bits: on-chip memory, in whole BRAM blocks
        offchip_bits: intermediate feature-map bits moved across group boundaries
        bram_blocks: on-chip memory in BRAM blocks
        fits_onchip: onchip_bits within the budget
    """
    cycles: int
    onchip_bits: int
    offchip_bits: int
    bram_blocks: int
    fits_onchip: bool


def conv_units(net: NetworkDesc) -> list[tuple[str, ...]]:
    """Every convolution with the poolings and sums that follow it."""
    units: list[list[str]] = []
    for layer in net.compute_layers:
        if layer.is_conv or not units:
            units.append([layer.id])
        else:
            units[-1].append(layer.id)
    return [tuple(unit) for unit in units]


def segment_units(net: NetworkDesc, cut_at: str = "pool") -> list[tuple[str, ...]]:
    """
    Units that groups are made of.

    Args:
        net: The network.
        cut_at: "conv" to allow group boundaries after every convolution unit,
          "pool" to allow them only after poolings.
    """
    units = conv_units(net)
    if cut_at == "conv":
        return units
    if cut_at != "pool":
        raise ValueError(f"Invalid cut point: {cut_at}")
    segments: list[tuple[str, ...]] = []
    current: list[str] = []
    for unit in units:
        current += unit
        if net.layer(unit[-1]).kind == LayerKind.MAXPOOL:
            segments.append(tuple(current))
            current = []
    if current:
        segments.append(tuple(current))
    return segments


def enumerate_groupings(units: Sequence, max_layers: int = 16) -> list[tuple[tuple, ...]]:
    """
    All partitions of `units` into runs of consecutive units: 2**(L-1) for L units.

    Raises:
        EnumerationCapError: More than `max_layers` units.
    """
    count = len(units)
    if count > max_layers:
        raise EnumerationCapError(f"{count} units exceed the enumeration cap of {max_layers}")
    if count == 0:
        return [()]
    result = []
    for cuts in itertools.product((False, True), repeat=count - 1):
        groups, start = [], 0
        for position, cut in enumerate(cuts, start=1):
            if cut:
                groups.append(tuple(units[start:position]))
                start = position
        groups.append(tuple(units[start:]))
        result.append(tuple(groups))
    return result


def group_blocking(net: NetworkDesc, group: Sequence[str], tile: Tile, style: GroupStyle,
                   pad_mode: Optional[PadMode] = None) -> dict[str, LayerBlocking]:
    """
    Blocking of the layers of a group: the group input is cut into blocks of
    `tile`; later layers inherit their producer's output grid, except the
    convolutions of fixed groups, whose input is cut into blocks of `tile` again.
    """
    result: dict[str, LayerBlocking] = {}
    previous: Optional[BlockGrid] = None
    for position, layer_id in enumerate(group):
        layer = net.layer(layer_id)
        _channels, rows, cols = net.input_of(layer_id)
        if position == 0 or (layer.is_conv and style == GroupStyle.FIXED):
            grid = BlockGrid.fixed(rows, cols, *tile)
        else:
            grid = previous
        result[layer_id] = layer_blocking(net, layer, grid, True, pad_mode)
        previous = result[layer_id].out_grid
    return result


@dataclass(frozen=True)
class Stage:
    """Layers of a group that share a block structure, and their input grid."""
    layers: tuple[str, ...]
    grid: BlockGrid


def group_stages(group: Sequence[str], blocking: BlockingPlan) -> list[Stage]:
    """
    Split a group where a layer's input grid coarsens its producer's output grid.

    Raises:
        PlanMismatchError: A layer's grid neither equals nor coarsens its
          producer's output grid.
    """
    stages: list[Stage] = []
    current: list[str] = []
    grid = None
    for position, layer_id in enumerate(group):
        layer_grid = blocking[layer_id].grid
        if position > 0:
            produced = blocking[group[position - 1]].out_grid
            if layer_grid == produced:
                current.append(layer_id)
                continue
            if not layer_grid.coarsens(produced):
                raise PlanMismatchError(
                    f"{layer_id}: blocks do not merge blocks of {group[position - 1]}")
            stages.append(Stage(tuple(current), grid))
        current, grid = [layer_id], layer_grid
    if current:
        stages.append(Stage(tuple(current), grid))
    return stages


class ResidualRoute(Enum):
    """Where a sum finds its residual operand."""
    SKIP = "skip"            # copied into a skip buffer inside the group
    EXTERNAL = "external"    # read from the boundary region or DRAM


@dataclass(frozen=True)
class ResidualPlan:
    """Routes and skip-buffer slots of the sums of a group."""
    routes: dict[str, ResidualRoute] = field(default_factory=dict)
    slots: dict[str, int] = field(default_factory=dict)
    copy_after: dict[str, list[str]] = field(default_factory=dict)
    slot_bits: tuple[int, ...] = ()


def _block_bits(grid: BlockGrid, channels: int, bits: int) -> int:
    rows, cols = grid.max_block
    return rows * cols * channels * bits


def residual_plan(net: NetworkDesc, group: Sequence[str], stages: Sequence[Stage],
                  blocking: BlockingPlan, bits: int) -> ResidualPlan:
    """
    Route the residual operands of the sums of a group.

    Operands produced in the same stage (or the group input, for sums of the
    first stage) are copied into skip buffers when produced; other operands
    come from outside the group. Skip buffers are reused once their sum ran.

    Raises:
        PlanMismatchError: An operand produced inside the group has other blocks.
    """
    stage_of = {lid: index for index, stage in enumerate(stages) for lid in stage.layers}
    position = {lid: index for index, lid in enumerate(group)}
    group_input = net.producer(group[0]).id
    routes, intervals = {}, []
    copy_after: dict[str, list[str]] = {}
    for layer_id in group:
        layer = net.layer(layer_id)
        if layer.kind != LayerKind.ELTWISE_ADD:
            continue
        source = layer.residual_source
        grid = blocking[layer_id].grid
        if source in position:
            if stage_of[source] != stage_of[layer_id] or blocking[source].out_grid != grid:
                raise PlanMismatchError(
                    f"{layer_id}: residual {source} has other blocks inside the group")
            routes[layer_id] = ResidualRoute.SKIP
            start = position[source]
        elif source == group_input and stage_of[layer_id] == 0 and grid == stages[0].grid:
            routes[layer_id] = ResidualRoute.SKIP
            start = -1
        else:
            routes[layer_id] = ResidualRoute.EXTERNAL
            start = position[layer_id]
        if routes[layer_id] == ResidualRoute.SKIP:
            copy_after.setdefault(source, []).append(layer_id)
        intervals.append((start, position[layer_id], layer_id,
                          _block_bits(grid, net.shape(layer_id)[0], bits)))
    slots: dict[str, int] = {}
    slot_end: list[int] = []
    slot_bits: list[int] = []
    for start, end, layer_id, block_bits in sorted(intervals):
        for slot, busy_until in enumerate(slot_end):
            if busy_until < start:
                break
        else:
            slot = len(slot_end)
            slot_end.append(end)
            slot_bits.append(0)
        slot_end[slot] = end
        slot_bits[slot] = max(slot_bits[slot], block_bits)
        slots[layer_id] = slot
    return ResidualPlan(routes, slots, copy_after, tuple(slot_bits))


def boundary_maps(net: NetworkDesc, groups: Sequence[Sequence[str]]) -> dict[str, tuple[int, int]]:
    """
    Maps produced by a group and read by a later group, with the index of
    their producing group and of their last consuming group.
    """
    group_of = {lid: index for index, group in enumerate(groups) for lid in group}
    result = {}
    for layer_id, producer in group_of.items():
        readers = [group_of[c] for c in net.consumers(layer_id) if c in group_of]
        later = [g for g in readers if g > producer]
        if later:
            result[layer_id] = (producer, max(later))
    return result


def _map_bits(net: NetworkDesc, layer_id: str, bits: int) -> int:
    return math.prod(net.shape(layer_id)) * bits


def boundary_requirements(net: NetworkDesc, groups: Sequence[Sequence[str]], bits: int,
                          onchip: bool) -> tuple[int, int]:
    """
    Boundary region capacity and off-chip boundary traffic of a grouping.

    Returns:
        (boundary_bits, offchip_bits): with on-chip boundaries, the largest
        total of maps live at once and 0; otherwise 0 and the bits written
        plus read back across group boundaries.
    """
    maps = boundary_maps(net, groups)
    if onchip:
        peak = 0
        for index in range(len(groups)):
            peak = max(peak, sum(_map_bits(net, lid, bits)
                                 for lid, (first, last) in maps.items()
                                 if first <= index <= last))
        return peak, 0
    group_of = {lid: index for index, group in enumerate(groups) for lid in group}
    traffic = 0
    for layer_id, (producer, _last) in maps.items():
        size = _map_bits(net, layer_id, bits)
        readers = [c for c in net.consumers(layer_id)
                   if c in group_of and group_of[c] > producer]
        traffic += size * (1 + len(readers))
    return 0, traffic


@dataclass(frozen=True)
class GroupEval:  # pylint: disable=too-many-instance-attributes
    """Evaluation of one group under a start tile and a style."""
    layers: tuple[str, ...]
    tile: Tile
    style: GroupStyle
    blocking: dict[str, LayerBlocking]
    input_bits: int
    intermediate_bits: int
    extra_bits: tuple[int, ...]
    skip_bits: tuple[int, ...]
    cycles: int
    channel_tiles: dict[str, Tile]
    weight_bits: int

    @property
    def signature(self) -> tuple:
        """Identifies evaluations with the same blocking."""
        return tuple((lid, blocking.grid) for lid, blocking in self.blocking.items())


# pylint: disable=too-many-locals
def evaluate_group(net: NetworkDesc, group: Sequence[str], tile: Tile, style: GroupStyle,
                   budget: HardwareBudget, pad_mode: Optional[PadMode] = None) -> GroupEval:
    """
    Blocking, buffer needs and cycles of a group.

    Raises:
        InfeasibleBlockingError: The tile cannot block some layer.
        PlanMismatchError: The resulting blocks cannot flow through the group.
    """
    act_bits = word_bits(net.activation_format, budget.activation_bits)
    wgt_bits = word_bits(net.weight_format, budget.activation_bits)
    blocks = group_blocking(net, group, tile, style, pad_mode)
    blocking = BlockingPlan(blocks)
    stages = group_stages(group, blocking)
    residuals = residual_plan(net, group, stages, blocking, act_bits)
    in_channels = net.input_of(group[0])[0]
    intermediate = max(_block_bits(blocks[lid].out_grid, net.shape(lid)[0], act_bits)
                       for lid in group)
    extras = tuple(_block_bits(stage.grid, net.input_of(stage.layers[0])[0], act_bits)
                   for stage in stages[1:])
    cycles, weights, tiles = 0, 0, {}
    for layer_id in group:
        layer = net.layer(layer_id)
        if not layer.is_conv:
            continue
        tm, tn = channel_tiles(layer, budget, wgt_bits)
        tiles[layer_id] = (tm, tn)
        weights += layer.weight_count * wgt_bits
        tr, tc = blocks[layer_id].out_grid.max_block
        cycles += estimate_cycles(ConvGeometry.of_layer(net, layer_id), tr, tc, tm, tn,
                                  budget.n_pe)
    return GroupEval(tuple(group), tuple(tile), style, blocks,
                     _block_bits(stages[0].grid, in_channels, act_bits), intermediate,
                     extras, residuals.slot_bits, cycles, tiles, weights)


def _elementwise_max(rows: Iterable[Sequence[int]]) -> tuple[int, ...]:
    result: list[int] = []
    for row in rows:
        for index, value in enumerate(row):
            if index < len(result):
                result[index] = max(result[index], value)
            else:
                result.append(value)
    return tuple(result)


def assemble_plan(net: NetworkDesc, evals: Sequence[GroupEval], budget: HardwareBudget,
                  onchip_boundaries: bool = True, prefetch: bool = False,
                  pad_mode: Optional[PadMode] = None,
                  plan_id: int = 0) -> tuple[FusionPlan, PlanScore]:
    """Combine group evaluations into a scored fusion plan."""
    act_bits = word_bits(net.activation_format, budget.activation_bits)
    groups = tuple(ev.layers for ev in evals)
    boundary, offchip = boundary_requirements(net, groups, act_bits, onchip_boundaries)
    input_bits = max((ev.input_bits for ev in evals), default=0)
    weight_bits = budget.weight_buffer_bits or sum(ev.weight_bits for ev in evals)
    alloc = BufferAlloc(
        input_bits=input_bits,
        intermediate_bits=max((ev.intermediate_bits for ev in evals), default=0),
        prefetch_bits=input_bits if prefetch else 0,
        extra_bits=_elementwise_max(ev.extra_bits for ev in evals),
        skip_bits=_elementwise_max(ev.skip_bits for ev in evals),
        boundary_bits=boundary,
        weight_bits=weight_bits)
    tile_sizes = {lid: blocking.grid.max_block
                  for ev in evals for lid, blocking in ev.blocking.items()}
    plan = FusionPlan(
        groups=groups, styles=tuple(ev.style for ev in evals),
        group_tiles=tuple(ev.tile for ev in evals), tile_sizes=tile_sizes,
        channel_tiles={lid: t for ev in evals for lid, t in ev.channel_tiles.items()},
        buffer_alloc=alloc, onchip_boundaries=onchip_boundaries, prefetch=prefetch,
        pad_mode=pad_mode, activation_bits=act_bits,
        weight_bits=word_bits(net.weight_format, budget.activation_bits), plan_id=plan_id)
    onchip = alloc.onchip_bits(budget.bram_block_bits)
    score = PlanScore(cycles=sum(ev.cycles for ev in evals), onchip_bits=onchip,
                      offchip_bits=offchip, bram_blocks=alloc.bram_blocks(budget.bram_block_bits),
                      fits_onchip=onchip <= budget.bram_bits)
    return plan, score


def check_groups(net: NetworkDesc, groups: Sequence[Sequence[str]]) -> None:
    """Raise PlanMismatchError unless `groups` cover the compute layers of `net` in order."""
    flat = [lid for group in groups for lid in group]
    expected = [layer.id for layer in net.compute_layers]
    if flat != expected or any(not group for group in groups):
        raise PlanMismatchError(f"Groups {groups} do not cover layers {expected} in order")


def _per_group(value, count: int) -> list[Tile]:
    if isinstance(value, int):
        return [(value, value)] * count
    if isinstance(value, tuple) and len(value) == 2 and all(isinstance(v, int) for v in value):
        return [value] * count
    tiles = [(v, v) if isinstance(v, int) else tuple(v) for v in value]
    if len(tiles) != count:
        raise ValueError(f"{len(tiles)} tiles for {count} groups")
    return tiles


# pylint: disable=too-many-arguments
def plan_from_grouping(net: NetworkDesc, groups: Sequence[Union[int, Sequence[str]]],
                       tiles: Union[int, Tile, Sequence[Tile]],
                       styles: Union[str, GroupStyle, Sequence[Union[str, GroupStyle]]] =
                       GroupStyle.HIERARCHICAL,
                       budget: Optional[HardwareBudget] = None,
                       onchip_boundaries: bool = True, prefetch: bool = False,
                       pad_mode: Optional[PadMode] = None) -> FusionPlan:
    """
    Build the fusion plan of a given grouping.

    Args:
        net: The network.
        groups: Either the number of convolutions of every group (each with
          its following poolings and sums), or the layer ids of every group.
        tiles: Start tile of all groups, as an int or a (rows, cols) tuple,
          or a list with one tile per group.
        styles: Style of all groups, or one per group.
        budget: Hardware budget (default: unlimited).
        onchip_boundaries: Keep group outputs on chip.
        prefetch: Add the prefetch buffer.
        pad_mode: Block padding mode (default: each layer's padding mode).

    Raises:
        PlanMismatchError: The groups do not cover the network, or blocks
          cannot flow through some group.
        InfeasibleBlockingError: Some tile cannot block some layer.
    """
    budget = budget or HardwareBudget(bram_bits=0)
    if groups and isinstance(groups[0], int):
        units = conv_units(net)
        if sum(groups) != len(units):
            raise PlanMismatchError(f"Grouping {groups} does not cover {len(units)} convolutions")
        layer_groups, start = [], 0
        for count in groups:
            layer_groups.append(tuple(lid for unit in units[start:start + count] for lid in unit))
            start += count
    else:
        layer_groups = [tuple(group) for group in groups]
    check_groups(net, layer_groups)
    if isinstance(styles, (str, GroupStyle)):
        styles = [styles] * len(layer_groups)
    evals = [evaluate_group(net, group, tile, GroupStyle.parse(style), budget, pad_mode)
             for group, tile, style in zip(layer_groups, _per_group(tiles, len(layer_groups)),
                                           styles)]
    plan, _score = assemble_plan(net, evals, budget, onchip_boundaries, prefetch, pad_mode)
    return plan


def blocking_from_plan(net: NetworkDesc, plan: FusionPlan) -> BlockingPlan:
    """The blocking of every layer that a fusion plan realises."""
    check_groups(net, plan.groups)
    layers: dict[str, LayerBlocking] = {}
    rows, cols = net.input_shape[1:]
    whole = BlockGrid.whole(rows, cols)
    previous = whole
    grouped = {}
    for group, tile, style in zip(plan.groups, plan.group_tiles, plan.styles):
        grouped.update(group_blocking(net, group, tile, style, plan.pad_mode))
    for layer in net.layers:
        if layer.id in grouped:
            layers[layer.id] = grouped[layer.id]
        elif layer.kind == LayerKind.INPUT:
            layers[layer.id] = LayerBlocking(layer.id, whole, whole)
        else:
            layers[layer.id] = LayerBlocking(layer.id, previous, previous)
        previous = layers[layer.id].out_grid
    return BlockingPlan(layers, "fusion")


def estimate_memory(plan: FusionPlan, net: NetworkDesc, budget: HardwareBudget) -> BufferAlloc:
    """On-chip buffer capacities needed by `plan`, recomputed from its groups and tiles."""
    if not plan.groups:
        return BufferAlloc(weight_bits=budget.weight_buffer_bits)
    evals = [evaluate_group(net, group, tile, style, budget, plan.pad_mode)
             for group, tile, style in zip(plan.groups, plan.group_tiles, plan.styles)]
    recomputed, _score = assemble_plan(net, evals, budget, plan.onchip_boundaries,
                                       plan.prefetch, plan.pad_mode)
    return recomputed.buffer_alloc


def score_plan(net: NetworkDesc, plan: FusionPlan, budget: HardwareBudget) -> PlanScore:
    """Cycles and memory of `plan` under `budget`."""
    evals = [evaluate_group(net, group, tile, style, budget, plan.pad_mode)
             for group, tile, style in zip(plan.groups, plan.group_tiles, plan.styles)]
    _plan, score = assemble_plan(net, evals, budget, plan.onchip_boundaries, plan.prefetch,
                                 plan.pad_mode)
    return score


def pareto_frontier(frame: DataFrame) -> DataFrame:
    """
    Rows of `frame` not dominated in (cycles, onchip_bits): sort by cycles and
    keep every row improving the best on-chip memory so far, and every row
    scoring the same as a kept one.
    """
    ordered = frame.sort_values(["cycles", "onchip_bits", "plan_id"])
    keep, best, last = [], None, None
    for row in ordered.itertuples():
        key = (row.cycles, row.onchip_bits)
        if best is None or row.onchip_bits < best or key == last:
            keep.append(row.Index)
            best, last = row.onchip_bits, key
    return ordered.loc[keep]


PLAN_COLUMNS = ["plan_id", "grouping", "styles", "tiles", "cycles", "onchip_bits",
                "bram_blocks", "offchip_bits", "fits_onchip", "pareto"]


@dataclass
class Exploration:
    """Scored plans, ordered by (cycles, onchip_bits, plan_id), and their Pareto subset."""
    net: NetworkDesc
    plans: list[tuple[FusionPlan, PlanScore]]
    pareto_ids: set[int]

    @property
    def pareto(self) -> list[tuple[FusionPlan, PlanScore]]:
        """The Pareto-optimal plans."""
        return [(plan, score) for plan, score in self.plans if plan.plan_id in self.pareto_ids]

    @property
    def feasible(self) -> list[tuple[FusionPlan, PlanScore]]:
        """The plans that fit on chip."""
        return [(plan, score) for plan, score in self.plans if score.fits_onchip]

    def best(self) -> Optional[tuple[FusionPlan, PlanScore]]:
        """The fastest plan that fits on chip, if any."""
        feasible = self.feasible
        return feasible[0] if feasible else None

    def to_frame(self) -> DataFrame:
        """One row per plan."""
        rows = []
        for plan, score in self.plans:
            described = plan.describe(self.net)
            rows.append([plan.plan_id, described["grouping"], described["styles"],
                         described["tiles"], score.cycles, score.onchip_bits,
                         score.bram_blocks, score.offchip_bits, score.fits_onchip,
                         plan.plan_id in self.pareto_ids])
        return DataFrame(rows, columns=PLAN_COLUMNS)


def _has_merges(net: NetworkDesc, group: Sequence[str]) -> bool:
    seen_pool = False
    for layer_id in group:
        layer = net.layer(layer_id)
        if layer.kind == LayerKind.MAXPOOL:
            seen_pool = True
        elif layer.is_conv and seen_pool:
            return True
    return False


# pylint: disable=too-many-arguments, too-many-locals
def explore(net: NetworkDesc, budget: HardwareBudget, candidate_tiles: Iterable[Tile],
            styles: Sequence[GroupStyle] = (GroupStyle.HIERARCHICAL, GroupStyle.FIXED),
            cut_at: str = "pool", boundary_policies: Sequence[bool] = (True, False),
            max_layers: int = 16, max_plans: int = 200_000, prefetch: bool = False,
            pad_mode: Optional[PadMode] = None) -> Exploration:
    """
    Score every grouping of `net` with every assignment of start tiles and
    styles to its groups.

    Args:
        net: The network.
        budget: Hardware budget.
        candidate_tiles: Start tiles (T_r, T_c) to try for every group.
        styles: Group styles to try; fixed groups are only tried when they
          differ from hierarchical ones, that is when they merge blocks.
        cut_at: Where group boundaries may go, see `segment_units`.
        boundary_policies: Try on-chip boundaries (True), spilled ones (False), or both.
        max_layers: Enumeration cap on the number of units.
        max_plans: Cap on the number of scored plans.
        prefetch: Add the prefetch buffer.
        pad_mode: Block padding mode.

    Raises:
        ValueError: No candidate tiles.
        EnumerationCapError: A cap is exceeded.
    """
    candidate_tiles = [tuple(tile) for tile in candidate_tiles]
    if not candidate_tiles:
        raise ValueError("No candidate tiles")
    units = segment_units(net, cut_at)
    groupings = enumerate_groupings(units, max_layers)
    logging.info("Exploring %d groupings of %d units with %d candidate tiles",
                 len(groupings), len(units), len(candidate_tiles))
    options_cache: dict[tuple[str, ...], list[GroupEval]] = {}

    def group_options(group: tuple[str, ...]) -> list[GroupEval]:
        if group in options_cache:
            return options_cache[group]
        options, seen = [], set()
        for tile in candidate_tiles:
            for style in styles:
                if style == GroupStyle.FIXED and not _has_merges(net, group):
                    continue
                try:
                    ev = evaluate_group(net, group, tile, style, budget, pad_mode)
                except (InfeasibleBlockingError, PlanMismatchError) as error:
                    logging.debug("Skipping %s %s on %s: %s", style.code, tile, group[0], error)
                    continue
                if (style, ev.signature) not in seen:
                    seen.add((style, ev.signature))
                    options.append(ev)
        options_cache[group] = options
        return options

    plans: list[tuple[FusionPlan, PlanScore]] = []
    for grouping in groupings:
        groups = [tuple(lid for unit in run for lid in unit) for run in grouping]
        options = [group_options(group) for group in groups]
        if not all(options):
            continue
        policies = boundary_policies if boundary_maps(net, groups) else boundary_policies[:1]
        for combo in itertools.product(*options):
            for onchip in policies:
                if len(plans) >= max_plans:
                    raise EnumerationCapError(f"More than {max_plans} plans")
                plans.append(assemble_plan(net, combo, budget, onchip, prefetch, pad_mode,
                                           plan_id=len(plans)))
    plans.sort(key=lambda item: (item[1].cycles, item[1].onchip_bits, item[0].plan_id))
    frame = DataFrame([(plan.plan_id, score.cycles, score.onchip_bits) for plan, score in plans],
                      columns=["plan_id", "cycles", "onchip_bits"])
    pareto_ids = set(pareto_frontier(frame)["plan_id"]) if plans else set()
    fitting = sum(1 for _plan, score in plans if score.fits_onchip)
    logging.info("Scored %d plans, %d fit on chip, %d on the Pareto front",
                 len(plans), fitting, len(pareto_ids))
    if plans and not fitting:
        logging.warning("No plan fits the %d BRAM blocks of budget %s",
                        budget.bram_blocks, budget.name)
    return Exploration(net, plans, {int(pid) for pid in pareto_ids})
