"""
Block convolution.

A feature map is cut into a grid of spatial blocks. Every block is padded
on its own ("block padding") and convolved independently, and the block
outputs are concatenated. Block padding is chosen so that the concatenated
output has exactly the dimensions of the unblocked convolution:

    (I + p_lead + p_trail - k) // s + 1  ==  sum over blocks of
    (I_b + p_b_lead + p_b_trail - k) // s + 1

Blocking patterns assign grids to the layers of a network:
    fixed: every blocked layer is cut into blocks of (at most) T_r x T_c;
           after pooling, adjacent blocks merge back to T_r x T_c.
    hierarchical: the first blocked layer is split into rows x cols blocks,
           and later layers keep the number of blocks while blocks shrink.
"""
from __future__ import annotations
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
import json
import logging
import re
from typing import NamedTuple, Optional, Sequence

import numpy as np
import yaml

from .networks import (LayerDesc, LayerKind, LayerParams, NetworkDesc, NetworkError,
                       apply_layer)
from .tensors import (MacCount, PadMode, ScalarFormat, Tensor4D, conv2d_ref, conv_output_extent,
                      eltwise_add, mac_count, maxpool2d)


class InfeasiblePaddingError(ValueError):
    """No block padding reproduces the unblocked output extent."""

    def __init__(self, message: str, residual: int):
        super().__init__(f"{message} (residual mismatch: {residual})")
        self.residual = residual


class InfeasibleBlockingError(ValueError):
    """A blocking cannot be applied to a layer."""

    def __init__(self, message: str, layer: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class Block(NamedTuple):
    """A block of a grid: its (row, col) index and its row and column ranges."""
    index: tuple[int, int]
    rows: tuple[int, int]
    cols: tuple[int, int]

    @property
    def height(self) -> int:
        """Number of rows."""
        return self.rows[1] - self.rows[0]

    @property
    def width(self) -> int:
        """Number of columns."""
        return self.cols[1] - self.cols[0]

    @property
    def row_slice(self) -> slice:
        """Rows as a slice."""
        return slice(*self.rows)

    @property
    def col_slice(self) -> slice:
        """Columns as a slice."""
        return slice(*self.cols)


def _cuts_from_extents(extents: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(c) for c in np.cumsum(extents)[:-1])


def _bounds(cuts: Sequence[int], extent: int) -> list[tuple[int, int]]:
    edges = [0, *cuts, extent]
    return list(zip(edges[:-1], edges[1:]))


@dataclass(frozen=True)
class BlockGrid:
    """
    A partition of a height x width plane into blocks.

    Attributes:
        height: number of rows of the plane
        width: number of columns of the plane
        row_cuts: ascending row positions where blocks start, strictly inside (0, height)
        col_cuts: ascending column positions where blocks start, strictly inside (0, width)
    """
    height: int
    width: int
    row_cuts: tuple[int, ...] = ()
    col_cuts: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "row_cuts", tuple(int(c) for c in self.row_cuts))
        object.__setattr__(self, "col_cuts", tuple(int(c) for c in self.col_cuts))
        for cuts, extent in ((self.row_cuts, self.height), (self.col_cuts, self.width)):
            edges = (0, *cuts, extent)
            if any(a >= b for a, b in zip(edges[:-1], edges[1:])):
                raise ValueError(f"Cuts {cuts} do not partition extent {extent}")

    @classmethod
    def whole(cls, height: int, width: int) -> BlockGrid:
        """The grid with a single block."""
        return cls(height, width)

    @classmethod
    def even(cls, height: int, width: int, rows: int, cols: int) -> BlockGrid:
        """A rows x cols grid with blocks as equal as possible."""
        if not (0 < rows <= height and 0 < cols <= width):
            raise ValueError(f"Cannot split {height}x{width} into {rows}x{cols} blocks")
        return cls(height, width,
                   tuple(i * height // rows for i in range(1, rows)),
                   tuple(j * width // cols for j in range(1, cols)))

    @classmethod
    def fixed(cls, height: int, width: int, block_rows: int, block_cols: int) -> BlockGrid:
        """Blocks of block_rows x block_cols, the last ones possibly smaller."""
        if block_rows <= 0 or block_cols <= 0:
            raise ValueError(f"Invalid block size {block_rows}x{block_cols}")
        return cls(height, width, tuple(range(block_rows, height, block_rows)),
                   tuple(range(block_cols, width, block_cols)))

    @classmethod
    def from_extents(cls, row_extents: Sequence[int], col_extents: Sequence[int]) -> BlockGrid:
        """The grid with the given block extents."""
        return cls(int(sum(row_extents)), int(sum(col_extents)),
                   _cuts_from_extents(row_extents), _cuts_from_extents(col_extents))

    @property
    def row_bounds(self) -> list[tuple[int, int]]:
        """(start, stop) of every block row."""
        return _bounds(self.row_cuts, self.height)

    @property
    def col_bounds(self) -> list[tuple[int, int]]:
        """(start, stop) of every block column."""
        return _bounds(self.col_cuts, self.width)

    @property
    def row_extents(self) -> list[int]:
        """Height of every block row."""
        return [stop - start for start, stop in self.row_bounds]

    @property
    def col_extents(self) -> list[int]:
        """Width of every block column."""
        return [stop - start for start, stop in self.col_bounds]

    @property
    def shape(self) -> tuple[int, int]:
        """Number of block rows and block columns."""
        return len(self.row_cuts) + 1, len(self.col_cuts) + 1

    @property
    def count(self) -> int:
        """Number of blocks."""
        rows, cols = self.shape
        return rows * cols

    @property
    def max_block(self) -> tuple[int, int]:
        """Largest block height and width."""
        return max(self.row_extents), max(self.col_extents)

    def blocks(self) -> list[Block]:
        """All blocks in row-major order."""
        return [Block((i, j), rows, cols)
                for i, rows in enumerate(self.row_bounds)
                for j, cols in enumerate(self.col_bounds)]

    def block(self, i: int, j: int) -> Block:
        """Block (i, j)."""
        return Block((i, j), self.row_bounds[i], self.col_bounds[j])

    def coarsens(self, finer: BlockGrid) -> bool:
        """Is every block of this grid a union of blocks of `finer`?"""
        return ((self.height, self.width) == (finer.height, finer.width)
                and set(self.row_cuts) <= set(finer.row_cuts)
                and set(self.col_cuts) <= set(finer.col_cuts))

    def blocks_within(self, rows: tuple[int, int], cols: tuple[int, int]) -> list[Block]:
        """The blocks inside a region, in row-major order."""
        return [block for block in self.blocks()
                if rows[0] <= block.rows[0] and block.rows[1] <= rows[1]
                and cols[0] <= block.cols[0] and block.cols[1] <= cols[1]]

    def to_dict(self) -> dict:
        """A JSON-serializable description."""
        return {"height": self.height, "width": self.width,
                "row_cuts": list(self.row_cuts), "col_cuts": list(self.col_cuts)}

    @classmethod
    def from_dict(cls, content: dict) -> BlockGrid:
        """Parse a grid description."""
        return cls(int(content["height"]), int(content["width"]),
                   tuple(content.get("row_cuts", ())), tuple(content.get("col_cuts", ())))


PadPair = tuple[int, int]


def _pad_pair(padding) -> PadPair:
    if isinstance(padding, (int, np.integer)):
        return int(padding), int(padding)
    lead, trail = padding
    return int(lead), int(trail)


def _block_outputs(extent: int, k: int, stride: int, lead: int, trail: int) -> Optional[int]:
    if extent + lead + trail < k:
        return None
    return conv_output_extent(extent, k, stride, lead, trail)


@lru_cache(maxsize=4096)
def _solve(extent: int, k: int, stride: int, wanted: int, copies: int) -> PadPair:
    # Smallest total first, then most symmetric, then the extra unit trailing
    candidates = sorted(((lead, trail) for lead in range(k) for trail in range(k)),
                        key=lambda pair: (pair[0] + pair[1], abs(pair[0] - pair[1]), pair[0]))
    residual = None
    for lead, trail in candidates:
        outputs = _block_outputs(extent, k, stride, lead, trail)
        if outputs is None:
            continue
        if copies * outputs == wanted:
            return lead, trail
        if residual is None or abs(wanted - copies * outputs) < abs(residual):
            residual = wanted - copies * outputs
    raise InfeasiblePaddingError(
        f"No padding of at most {k - 1} per side gives {wanted} outputs from "
        f"{copies} block(s) of extent {extent} (k={k}, s={stride})",
        residual=wanted if residual is None else residual)


def solve_block_padding(extent: int, k: int, stride: int, orig_pad, blocks: int) -> PadPair:
    """
    Block padding of an even split of an axis into `blocks` blocks.

    Args:
        extent: Input extent I of the axis; must be a multiple of `blocks`.
        k: Kernel size.
        stride: Stride s.
        orig_pad: Original padding, an int or a (leading, trailing) pair.
        blocks: Number of blocks N.

    Returns:
        The smallest (leading, trailing) padding, each side at most k - 1, such
        that N blocks produce exactly the unblocked number of outputs. Ties go
        to the symmetric padding, then to the larger trailing side. A single
        block keeps the original padding.

    Raises:
        InfeasiblePaddingError: No such padding exists.
    """
    lead, trail = _pad_pair(orig_pad)
    if blocks <= 0 or extent % blocks:
        raise ValueError(f"Extent {extent} is not split evenly into {blocks} blocks; "
                         "use solve_grid_padding for uneven grids")
    if blocks == 1:
        return lead, trail
    wanted = conv_output_extent(extent, k, stride, lead, trail)
    return _solve(extent // blocks, k, stride, wanted, blocks)


def solve_grid_padding(extents: Sequence[int], k: int, stride: int, orig_pad) -> list[PadPair]:
    """
    Block padding of every block of a possibly uneven split of an axis.

    Every output of the unblocked convolution is assigned to the block that
    contains the centre of its window (clamped into the map); each block then
    gets the smallest padding producing exactly its share of outputs.
    An axis with a single block keeps the original padding.

    Args:
        extents: Extent of every block along the axis.
        k: Kernel size.
        stride: Stride.
        orig_pad: Original padding, an int or a (leading, trailing) pair.

    Returns:
        A (leading, trailing) padding per block.

    Raises:
        InfeasiblePaddingError: Some block cannot produce its share.
    """
    lead, trail = _pad_pair(orig_pad)
    if len(extents) == 1:
        return [(lead, trail)]
    total = int(sum(extents))
    outputs = conv_output_extent(total, k, stride, lead, trail)
    centres = np.clip(np.arange(outputs) * stride - lead + (k - 1) // 2, 0, total - 1)
    ends = np.cumsum(extents)
    shares = np.bincount(np.searchsorted(ends, centres, side="right"), minlength=len(extents))
    return [_solve(int(extent), k, stride, int(share), 1)
            for extent, share in zip(extents, shares)]


@dataclass(frozen=True)
class BlockPadding:
    """
    Block padding of a grid. Padding is separable: every block row has a
    (top, bottom) pair and every block column a (left, right) pair.

    Attributes:
        rows: (top, bottom) per block row
        cols: (left, right) per block column
        mode: how padded positions are filled
    """
    rows: tuple[PadPair, ...]
    cols: tuple[PadPair, ...]
    mode: PadMode = PadMode.ZERO

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(_pad_pair(p) for p in self.rows))
        object.__setattr__(self, "cols", tuple(_pad_pair(p) for p in self.cols))

    @classmethod
    def uniform(cls, grid: BlockGrid, padding: Sequence[int],
                mode: PadMode = PadMode.ZERO) -> BlockPadding:
        """The same (top, bottom, left, right) padding for every block."""
        top, bottom, left, right = padding
        rows, cols = grid.shape
        return cls(((top, bottom),) * rows, ((left, right),) * cols, mode)

    def for_block(self, i: int, j: int) -> tuple[int, int, int, int]:
        """(top, bottom, left, right) padding of block (i, j)."""
        return self.rows[i] + self.cols[j]

    def check(self, grid: BlockGrid) -> None:
        """Raise ValueError unless this padding fits `grid`."""
        if (len(self.rows), len(self.cols)) != grid.shape:
            raise ValueError(f"Padding for {len(self.rows)}x{len(self.cols)} blocks "
                             f"used with a {grid.shape[0]}x{grid.shape[1]} grid")


def block_output_grid(grid: BlockGrid, bpad: BlockPadding, k: int, stride: int) -> BlockGrid:
    """Grid of the concatenated outputs of a blocked convolution."""
    bpad.check(grid)
    return BlockGrid.from_extents(
        [conv_output_extent(e, k, stride, *p) for e, p in zip(grid.row_extents, bpad.rows)],
        [conv_output_extent(e, k, stride, *p) for e, p in zip(grid.col_extents, bpad.cols)])


def split_blocks(tensor: Tensor4D, grid: BlockGrid) -> list[Tensor4D]:
    """The blocks of a tensor, in row-major block order."""
    if (tensor.height, tensor.width) != (grid.height, grid.width):
        raise ValueError(f"Grid {grid.height}x{grid.width} does not match "
                         f"tensor {tensor.height}x{tensor.width}")
    return [tensor.region(block.row_slice, block.col_slice) for block in grid.blocks()]


def concat_blocks(blocks: Sequence[Tensor4D], grid: BlockGrid) -> Tensor4D:
    """Concatenate blocks, given in row-major block order, into a tensor."""
    if len(blocks) != grid.count:
        raise ValueError(f"{len(blocks)} blocks for a grid of {grid.count}")
    if not blocks:
        raise ValueError("No blocks to concatenate")
    fmt, lead_dims = blocks[0].fmt, blocks[0].dims[:2]
    rows, cols = grid.shape
    for tensor, block in zip(blocks, grid.blocks()):
        if tensor.fmt != fmt or tensor.dims != lead_dims + (block.height, block.width):
            raise ValueError(f"Block {block.index} of dimensions {tensor.dims} "
                             f"inconsistent with the grid")
    data = np.concatenate([
        np.concatenate([blocks[i * cols + j].data for j in range(cols)], axis=3)
        for i in range(rows)], axis=2)
    return Tensor4D(data, fmt)


# pylint: disable=too-many-arguments
def block_conv2d(x: Tensor4D, weights: Tensor4D, bias: Optional[np.ndarray], grid: BlockGrid,
                 bpad: BlockPadding, stride: int = 1, depthwise: bool = False,
                 relu: bool = False, out_fmt: Optional[ScalarFormat] = None) -> Tensor4D:
    """
    Convolve every block of `x` independently and concatenate the results.

    Each block convolution sees only its own slice of the input, padded with
    its block padding.

    Args:
        x: Input tensor.
        weights: Filters, see `conv2d_ref`.
        bias: Optional bias, see `conv2d_ref`.
        grid: Blocking of the input.
        bpad: Block padding for `grid`.
        stride: Stride.
        depthwise: Depthwise convolution.
        relu: Apply ReLU after requantization.
        out_fmt: Output format (default: the input format).

    Returns:
        The concatenated output.
    """
    bpad.check(grid)
    outputs = [conv2d_ref(piece, weights, bias, stride=stride,
                          padding=bpad.for_block(*block.index), pad_mode=bpad.mode,
                          depthwise=depthwise, relu=relu, out_fmt=out_fmt)
               for piece, block in zip(split_blocks(x, grid), grid.blocks())]
    return concat_blocks(outputs, block_output_grid(grid, bpad, weights.dims[2], stride))


def block_maxpool2d(x: Tensor4D, grid: BlockGrid, k: int, stride: int) -> Tensor4D:
    """Max pooling of every block on its own."""
    outputs = [maxpool2d(piece, k, stride) for piece in split_blocks(x, grid)]
    return concat_blocks(outputs, BlockGrid.from_extents(
        [conv_output_extent(e, k, stride, 0, 0) for e in grid.row_extents],
        [conv_output_extent(e, k, stride, 0, 0) for e in grid.col_extents]))


def block_mac_count(channels: int, grid: BlockGrid, bpad: BlockPadding, k: int,
                    out_ch: int = 1, stride: int = 1, depthwise: bool = False) -> MacCount:
    """Total work of a blocked convolution, summed over its blocks."""
    total = MacCount(0, 0)
    for block in grid.blocks():
        total += mac_count((channels, block.height, block.width), k, out_ch=out_ch,
                           stride=stride, padding=bpad.for_block(*block.index),
                           depthwise=depthwise)
    return total


class BlockingKind(Enum):
    """Blocking pattern kinds."""
    FIXED = "fixed"
    HIERARCHICAL = "hierarchical"


@dataclass(frozen=True)
class BlockingPattern:
    """
    How the convolution layers of a network are blocked.

    Attributes:
        kind: fixed or hierarchical
        rows: block height (fixed) or number of block rows (hierarchical)
        cols: block width (fixed) or number of block columns (hierarchical)
        min_resolution: only block convolutions whose input is at least this
          large in both dimensions (default: the block size for fixed
          patterns, every layer for hierarchical ones)
        depth: after this many consecutive blocked convolutions, leave one
          convolution unblocked (default: never)
        pad_mode: block padding mode (default: each layer's own padding mode)
    """
    kind: BlockingKind
    rows: int
    cols: int
    min_resolution: Optional[int] = None
    depth: Optional[int] = None
    pad_mode: Optional[PadMode] = None

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError(f"Invalid blocking {self.rows}x{self.cols}")
        if self.depth is not None and self.depth <= 0:
            raise ValueError(f"Blocking depth must be positive: {self.depth}")
        if self.min_resolution is None and self.kind == BlockingKind.FIXED:
            object.__setattr__(self, "min_resolution", min(self.rows, self.cols))

    @classmethod
    def parse(cls, text: str, **options) -> BlockingPattern:
        """
        Parse a pattern such as `F28` (fixed 28x28 blocks), `F28x56` or `H2x2`
        (hierarchical 2x2 grid). Keyword `options` set the other attributes.
        """
        match = re.fullmatch(r"([FH])(\d+)(?:x(\d+))?", text.strip(), flags=re.IGNORECASE)
        if match is None:
            raise ValueError(f"Invalid blocking pattern: {text}")
        kind = BlockingKind.FIXED if match.group(1).upper() == "F" else BlockingKind.HIERARCHICAL
        rows = int(match.group(2))
        return cls(kind, rows, int(match.group(3) or rows), **options)

    def __str__(self) -> str:
        prefix = "F" if self.kind == BlockingKind.FIXED else "H"
        return f"{prefix}{self.rows}x{self.cols}"

    def applies_to(self, height: int, width: int) -> bool:
        """Should a convolution with a height x width input be blocked?"""
        return self.min_resolution is None or min(height, width) >= self.min_resolution


@dataclass(frozen=True)
class LayerBlocking:
    """
    Blocking of one layer.

    Attributes:
        layer: layer id
        grid: blocking of the layer input
        out_grid: blocking of the layer output
        padding: block padding (convolutions only)
        blocked: whether the layer is a block convolution
    """
    layer: str
    grid: BlockGrid
    out_grid: BlockGrid
    padding: Optional[BlockPadding] = None
    blocked: bool = False

    def to_dict(self) -> dict:
        """A JSON-serializable description."""
        result = {"id": self.layer, "blocked": self.blocked,
                  "grid": self.grid.to_dict(), "out_grid": self.out_grid.to_dict()}
        if self.padding is not None:
            result["pad_mode"] = self.padding.mode.value
            result["row_pads"] = [list(p) for p in self.padding.rows]
            result["col_pads"] = [list(p) for p in self.padding.cols]
            result["block_pads"] = [list(self.padding.for_block(*block.index))
                                    for block in self.grid.blocks()]
        return result

    @classmethod
    def from_dict(cls, content: dict) -> LayerBlocking:
        """Parse a layer blocking description."""
        padding = None
        if "row_pads" in content:
            padding = BlockPadding(tuple(content["row_pads"]), tuple(content["col_pads"]),
                                   PadMode(content.get("pad_mode", "zero")))
        return cls(str(content["id"]), BlockGrid.from_dict(content["grid"]),
                   BlockGrid.from_dict(content["out_grid"]), padding,
                   bool(content.get("blocked", False)))


@dataclass(frozen=True)
class BlockingPlan:
    """Blocking of every layer of a network, by layer id."""
    layers: dict[str, LayerBlocking]
    pattern: Optional[str] = None

    def __getitem__(self, layer_id: str) -> LayerBlocking:
        try:
            return self.layers[layer_id]
        except KeyError as error:
            raise KeyError(f"No blocking for layer {layer_id}") from error

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self.layers

    def to_dict(self) -> dict:
        """A JSON-serializable description."""
        return {"pattern": self.pattern,
                "layers": [blocking.to_dict() for blocking in self.layers.values()]}

    @classmethod
    def from_dict(cls, content: dict) -> BlockingPlan:
        """Parse a blocking plan description."""
        try:
            layers = [LayerBlocking.from_dict(layer) for layer in content["layers"]]
        except (KeyError, TypeError) as error:
            raise ValueError(f"Invalid blocking plan: {error}") from error
        return cls({blocking.layer: blocking for blocking in layers}, content.get("pattern"))


def save_blocking_plan(plan: BlockingPlan, file_path: str) -> None:
    """Write a blocking plan to a JSON file."""
    with open(file_path, "w", encoding="utf-8") as file:
        json.dump(plan.to_dict(), file, indent=2)
    logging.info("Written blocking plan to %s", file_path)


def load_blocking_plan(file_path: str) -> BlockingPlan:
    """Read a blocking plan from a JSON file."""
    with open(file_path, "r", encoding="utf-8") as file:
        return BlockingPlan.from_dict(yaml.safe_load(file))


def layer_blocking(net: NetworkDesc, layer: LayerDesc, grid: BlockGrid,
                   blocked: bool, pad_mode: Optional[PadMode] = None) -> LayerBlocking:
    """
    Blocking of `layer` when its input is cut by `grid`.

    Convolutions get block padding solving the output-extent constraint (or
    their original padding if `grid` has a single block); poolings pool every
    block and must reproduce the unblocked output extent; other layers keep
    their input grid.

    Raises:
        InfeasibleBlockingError: No block padding exists, or a block is too small.
    """
    if layer.kind == LayerKind.CONV:
        mode = pad_mode if (blocked and pad_mode is not None) else layer.pad_mode
        top, bottom, left, right = layer.padding
        try:
            if grid.count == 1:
                bpad = BlockPadding(((top, bottom),), ((left, right),), mode)
            else:
                bpad = BlockPadding(
                    tuple(solve_grid_padding(grid.row_extents, layer.k, layer.stride,
                                             (top, bottom))),
                    tuple(solve_grid_padding(grid.col_extents, layer.k, layer.stride,
                                             (left, right))),
                    mode)
            out_grid = block_output_grid(grid, bpad, layer.k, layer.stride)
        except ValueError as error:
            raise InfeasibleBlockingError(str(error), layer.id) from error
        return LayerBlocking(layer.id, grid, out_grid, bpad, blocked)
    if layer.kind == LayerKind.MAXPOOL:
        try:
            out_grid = BlockGrid.from_extents(
                [conv_output_extent(e, layer.k, layer.stride, 0, 0) for e in grid.row_extents],
                [conv_output_extent(e, layer.k, layer.stride, 0, 0) for e in grid.col_extents])
        except ValueError as error:
            raise InfeasibleBlockingError(str(error), layer.id) from error
        _channels, rows, cols = net.shape(layer.id)
        if (out_grid.height, out_grid.width) != (rows, cols):
            raise InfeasibleBlockingError(
                f"Pooling blocks gives {out_grid.height}x{out_grid.width}, not {rows}x{cols}",
                layer.id)
        return LayerBlocking(layer.id, grid, out_grid, None, blocked)
    return LayerBlocking(layer.id, grid, grid, None, blocked)


def make_blocking_plan(net: NetworkDesc, pattern: BlockingPattern) -> BlockingPlan:
    """
    Blocking of every layer of `net` under `pattern`.

    Convolutions failing the pattern's resolution predicate (or skipped by its
    blocking depth) keep a single block and their original padding. Poolings
    and sums keep the grid of their input.

    Raises:
        InfeasibleBlockingError: The pattern cannot be applied to some layer.
    """
    layers: dict[str, LayerBlocking] = {}
    previous: Optional[BlockGrid] = None
    run = 0
    inheriting = False
    for layer in net.layers:
        _channels, rows, cols = net.input_of(layer.id)
        if layer.kind == LayerKind.INPUT:
            whole = BlockGrid.whole(rows, cols)
            layers[layer.id] = LayerBlocking(layer.id, whole, whole)
        elif layer.kind == LayerKind.CONV:
            blocked = pattern.applies_to(rows, cols)
            if blocked and pattern.depth is not None and run >= pattern.depth:
                blocked = False
            if not blocked:
                run = 0
                inheriting = False
                grid = BlockGrid.whole(rows, cols)
            elif pattern.kind == BlockingKind.FIXED:
                grid = BlockGrid.fixed(rows, cols, pattern.rows, pattern.cols)
            elif inheriting:
                grid = previous
            else:
                try:
                    grid = BlockGrid.even(rows, cols, pattern.rows, pattern.cols)
                except ValueError as error:
                    raise InfeasibleBlockingError(str(error), layer.id) from error
            if blocked:
                run += 1
                inheriting = pattern.kind == BlockingKind.HIERARCHICAL
            layers[layer.id] = layer_blocking(net, layer, grid, blocked, pattern.pad_mode)
        else:
            layers[layer.id] = layer_blocking(net, layer, previous, False)
        previous = layers[layer.id].out_grid
    plan = BlockingPlan(layers, str(pattern))
    logging.info("Blocking %s: %.2f%% of convolution layers blocked",
                 pattern, 100 * blocking_ratio(plan, net))
    return plan


def blocking_ratio(plan: BlockingPlan, net: NetworkDesc) -> float:
    """Fraction of the convolution layers of `net` that `plan` blocks."""
    convs = net.conv_layers
    if not convs:
        return 0.0
    return sum(1 for layer in convs if plan[layer.id].blocked) / len(convs)


def stride_to_pool_rewrite(net: NetworkDesc) -> NetworkDesc:
    """
    Replace every strided convolution by a stride-1 convolution followed by
    an s x s max pooling with stride s, named `<id>_pool`.

    The pooled output has the shape of the original convolution output; when
    the stride-1 output is too short for that, the convolution's trailing
    padding grows accordingly. Residual edges to a rewritten convolution now
    point to its pooling.
    """
    layers: list[LayerDesc] = []
    renamed: dict[str, str] = {}
    for layer in net.layers:
        if layer.is_conv and layer.stride > 1:
            stride = layer.stride
            _channels, rows, cols = net.input_of(layer.id)
            _out_ch, want_rows, want_cols = net.shape(layer.id)
            top, bottom, left, right = layer.padding
            unit_rows = conv_output_extent(rows, layer.k, 1, top, bottom)
            unit_cols = conv_output_extent(cols, layer.k, 1, left, right)
            bottom += max(0, want_rows * stride - unit_rows)
            right += max(0, want_cols * stride - unit_cols)
            layers.append(replace(layer, stride=1, padding=(top, bottom, left, right)))
            pool = LayerDesc.maxpool(f"{layer.id}_pool", k=stride, stride=stride)
            layers.append(pool)
            renamed[layer.id] = pool.id
        elif layer.residual_source in renamed:
            layers.append(replace(layer, residual_source=renamed[layer.residual_source]))
        else:
            layers.append(layer)
    try:
        return replace(net, layers=tuple(layers))
    except NetworkError:
        logging.error("Rewriting strided convolutions of %s failed", net.name)
        raise


def blocked_maps(net: NetworkDesc, params: dict[str, LayerParams], x: Tensor4D,
                 plan: BlockingPlan) -> dict[str, Tensor4D]:
    """Output map of every layer when blocking each layer as `plan` says."""
    expected = (1,) + tuple(net.input_shape)
    if x.dims != expected:
        raise ValueError(f"Input of dimensions {x.dims}, network expects {expected}")
    maps: dict[str, Tensor4D] = {}
    current = x
    for layer in net.layers:
        blocking = plan[layer.id]
        if layer.kind == LayerKind.CONV:
            layer_params = params[layer.id]
            current = block_conv2d(current, layer_params.weights, layer_params.bias,
                                   blocking.grid, blocking.padding, stride=layer.stride,
                                   depthwise=layer.depthwise, relu=layer.relu,
                                   out_fmt=net.activation_format)
        elif layer.kind == LayerKind.MAXPOOL:
            current = block_maxpool2d(current, blocking.grid, layer.k, layer.stride)
        elif layer.kind == LayerKind.ELTWISE_ADD:
            current = eltwise_add(current, maps[layer.residual_source], relu=layer.relu)
        else:
            current = apply_layer(layer, current)
        maps[layer.id] = current
    return maps


def blocked_forward(net: NetworkDesc, params: dict[str, LayerParams], x: Tensor4D,
                    plan: BlockingPlan) -> Tensor4D:
    """Network output with every layer blocked as `plan` says."""
    return blocked_maps(net, params, x, plan)[net.output_id]
