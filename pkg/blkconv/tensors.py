"""
Reference tensor kernels over real and fixed-point NCHW tensors.

Fixed-point tensors store signed integers in `int64` arrays; a value
represents `integer / 2**fraction_bits`. Convolutions accumulate in 64-bit
integers and requantize with round-half-away-from-zero and saturation, so
requantization is the only lossy step. Real tensors (`real64`) are only
meant for oracles and tests.

Functions:
    conv2d_ref: Dense or depthwise 2D convolution with per-side padding.
    maxpool2d: Max pooling without padding.
    eltwise_add: Saturating element-wise sum.
    pad: Zero, replicate or reflect padding.
    mac_count: Kernel applications and multiply-accumulates of a convolution.
"""
from __future__ import annotations
from dataclasses import dataclass
from enum import Enum
import logging
import re
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


# Largest integer magnitude that float64 represents exactly
_EXACT_FLOAT_LIMIT = 2 ** 53

FIXED_BITWIDTHS = (4, 8, 16)


class ScalarKind(Enum):
    """Kinds of scalar values."""
    REAL = "real"
    FIXED = "fixed"


class PadMode(Enum):
    """How padded positions are filled."""
    ZERO = "zero"
    REPLICATE = "replicate"
    REFLECT = "reflect"

    @property
    def numpy_mode(self) -> str:
        """The equivalent `numpy.pad` mode."""
        return {"zero": "constant", "replicate": "edge", "reflect": "reflect"}[self.value]


@dataclass(frozen=True)
class ScalarFormat:
    """
    Number format of the values of a tensor.

    Attributes:
        kind: real (64-bit float) or signed fixed-point
        bitwidth: total number of bits (4, 8 or 16 for fixed formats, 64 for real)
        fraction_bits: number of fractional bits (fixed formats only)
    """
    kind: ScalarKind
    bitwidth: int = 64
    fraction_bits: int = 0

    def __post_init__(self):
        if self.kind == ScalarKind.FIXED:
            if self.bitwidth not in FIXED_BITWIDTHS:
                raise ValueError(f"Unsupported fixed-point bitwidth: {self.bitwidth}")
            if not 0 <= self.fraction_bits <= self.bitwidth:
                raise ValueError(f"Invalid number of fraction bits: {self.fraction_bits}")
        elif self.bitwidth != 64 or self.fraction_bits != 0:
            raise ValueError("Real formats are 64-bit without fraction bits")

    @classmethod
    def fixed(cls, bitwidth: int, fraction_bits: int = 0) -> ScalarFormat:
        """A signed fixed-point format."""
        return cls(ScalarKind.FIXED, bitwidth, fraction_bits)

    @classmethod
    def real(cls) -> ScalarFormat:
        """The 64-bit floating-point format."""
        return cls(ScalarKind.REAL)

    @classmethod
    def parse(cls, text: str) -> ScalarFormat:
        """
        Parse a format from its text form: `real64`, `fixedB` or `fixedB.F`.

        Args:
            text: The format as a string, such as "fixed8.4".

        Returns:
            The corresponding ScalarFormat.
        """
        text = text.strip().lower()
        if text in ("real", "real64"):
            return cls.real()
        match = re.fullmatch(r"fixed(\d+)(?:\.(\d+))?", text)
        if match is None:
            raise ValueError(f"Invalid scalar format: {text}")
        return cls.fixed(int(match.group(1)), int(match.group(2) or 0))

    def __str__(self) -> str:
        if self.kind == ScalarKind.REAL:
            return "real64"
        if self.fraction_bits:
            return f"fixed{self.bitwidth}.{self.fraction_bits}"
        return f"fixed{self.bitwidth}"

    @property
    def is_fixed(self) -> bool:
        """Is this a fixed-point format?"""
        return self.kind == ScalarKind.FIXED

    @property
    def dtype(self) -> np.dtype:
        """Storage type of the values."""
        return np.dtype(np.int64) if self.is_fixed else np.dtype(np.float64)

    @property
    def min_value(self) -> int:
        """Smallest storable integer (fixed formats only)."""
        return -(1 << (self.bitwidth - 1))

    @property
    def max_value(self) -> int:
        """Largest storable integer (fixed formats only)."""
        return (1 << (self.bitwidth - 1)) - 1

    @property
    def scale(self) -> int:
        """Number of integer steps per unit value."""
        return 1 << self.fraction_bits

    def saturate(self, values: np.ndarray) -> np.ndarray:
        """Clamp integer `values` into the range of this format."""
        if not self.is_fixed:
            return values
        return np.clip(values, self.min_value, self.max_value).astype(np.int64)

    def quantize(self, values: np.ndarray) -> np.ndarray:
        """Convert real `values` to this format, rounding half away from zero."""
        values = np.asarray(values, dtype=np.float64)
        if not self.is_fixed:
            return values.copy()
        return self.saturate(round_half_away(values * self.scale))


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round real values to integers, ties away from zero."""
    return (np.sign(values) * np.floor(np.abs(values) + 0.5)).astype(np.int64)


def shift_round(values: np.ndarray, shift: int) -> np.ndarray:
    """
    Divide integer `values` by `2**shift`, rounding half away from zero.
    A negative `shift` multiplies instead.
    """
    values = np.asarray(values, dtype=np.int64)
    if shift <= 0:
        return values << -shift
    half = 1 << (shift - 1)
    magnitude = (np.abs(values) + half) >> shift
    return np.where(values < 0, -magnitude, magnitude)


@dataclass(frozen=True, eq=False)
class Tensor4D:
    """
    An immutable NCHW tensor in a given scalar format.

    Attributes:
        data: values as an `int64` (fixed) or `float64` (real) array of rank 4
        fmt: scalar format of the values
    """
    data: np.ndarray
    fmt: ScalarFormat

    def __post_init__(self):
        raw = np.asarray(self.data)
        if self.fmt.is_fixed and raw.dtype.kind == "f" and raw.size \
                and not np.array_equal(raw, np.round(raw)):
            raise ValueError(f"Non-integral values for {self.fmt}; use `from_real` to quantize")
        data = np.array(raw, dtype=self.fmt.dtype, copy=True)
        if data.ndim != 4:
            raise ValueError(f"Tensors must have 4 dimensions, not {data.ndim}")
        if self.fmt.is_fixed and data.size:
            low, high = data.min(), data.max()
            if low < self.fmt.min_value or high > self.fmt.max_value:
                raise ValueError(f"Values [{low}, {high}] out of range for {self.fmt}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def from_real(cls, values: np.ndarray, fmt: ScalarFormat) -> Tensor4D:
        """Quantize real `values` into a tensor of format `fmt`."""
        return cls(fmt.quantize(values), fmt)

    @classmethod
    def zeros(cls, dims: Sequence[int], fmt: ScalarFormat) -> Tensor4D:
        """A tensor of zeros."""
        return cls(np.zeros(tuple(dims), dtype=fmt.dtype), fmt)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """Dimensions (n, c, h, w)."""
        return tuple(int(d) for d in self.data.shape)  # type: ignore[return-value]

    @property
    def channels(self) -> int:
        """Number of channels."""
        return self.dims[1]

    @property
    def height(self) -> int:
        """Number of rows."""
        return self.dims[2]

    @property
    def width(self) -> int:
        """Number of columns."""
        return self.dims[3]

    @property
    def size_bits(self) -> int:
        """Storage size of the tensor in bits."""
        return self.data.size * self.fmt.bitwidth

    def to_real(self) -> np.ndarray:
        """The represented values as floats."""
        if self.fmt.is_fixed:
            return self.data.astype(np.float64) / self.fmt.scale
        return self.data.astype(np.float64)

    def region(self, rows: slice = slice(None), cols: slice = slice(None),
               channels: slice = slice(None)) -> Tensor4D:
        """A spatial and channel slice of the tensor."""
        return Tensor4D(self.data[:, channels, rows, cols], self.fmt)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor4D):
            return NotImplemented
        return self.fmt == other.fmt and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.fmt, self.dims, self.data.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor4D(dims={self.dims}, fmt={self.fmt})"


Padding = Union[int, Sequence[int]]


def normalize_padding(padding: Padding) -> tuple[int, int, int, int]:
    """
    Per-side padding as (top, bottom, left, right).

    Args:
        padding: A single amount for all sides, a (vertical, horizontal) pair,
          or a (top, bottom, left, right) quadruple.
    """
    if isinstance(padding, (int, np.integer)):
        amounts = (int(padding),) * 4
    else:
        values = tuple(int(p) for p in padding)
        if len(values) == 2:
            amounts = (values[0], values[0], values[1], values[1])
        elif len(values) == 4:
            amounts = values
        else:
            raise ValueError(f"Invalid padding: {padding}")
    if any(p < 0 for p in amounts):
        raise ValueError(f"Padding amounts must be non-negative: {amounts}")
    return amounts  # type: ignore[return-value]


def conv_output_extent(extent: int, k: int, stride: int, pad_lead: int, pad_trail: int) -> int:
    """
    Output extent of a convolution or pooling window along one axis:
    `(extent + pad_lead + pad_trail - k) // stride + 1`.
    """
    if stride <= 0:
        raise ValueError(f"Stride must be positive: {stride}")
    padded = extent + pad_lead + pad_trail
    if k > padded:
        raise ValueError(f"Kernel {k} larger than padded extent {padded}")
    return (padded - k) // stride + 1


def pad(tensor: Tensor4D, amounts: Padding, mode: PadMode = PadMode.ZERO) -> Tensor4D:
    """
    Pad the spatial dimensions of a tensor.

    Args:
        tensor: The tensor to pad.
        amounts: Padding per side, see `normalize_padding`.
        mode: Zero, replicate (copy the boundary outward) or reflect (mirror
          around the boundary pixel, which is not duplicated).

    Returns:
        The padded tensor; its interior equals `tensor`.
    """
    top, bottom, left, right = normalize_padding(amounts)
    if not any((top, bottom, left, right)):
        return tensor
    if mode == PadMode.REFLECT:
        if max(top, bottom) >= tensor.height or max(left, right) >= tensor.width:
            raise ValueError(f"Reflect padding {(top, bottom, left, right)} too large "
                             f"for extent {tensor.height}x{tensor.width}")
    elif mode == PadMode.REPLICATE and (tensor.height == 0 or tensor.width == 0):
        raise ValueError("Cannot replicate the boundary of an empty tensor")
    widths = ((0, 0), (0, 0), (top, bottom), (left, right))
    return Tensor4D(np.pad(tensor.data, widths, mode=mode.numpy_mode), tensor.fmt)


def _check_conv_operands(x: Tensor4D, weights: Tensor4D, depthwise: bool) -> int:
    if x.fmt.kind != weights.fmt.kind:
        raise ValueError(f"Cannot convolve {x.fmt} input with {weights.fmt} weights")
    out_ch, in_ch, k_rows, k_cols = weights.dims
    if k_rows != k_cols:
        raise ValueError(f"Kernels must be square, not {k_rows}x{k_cols}")
    if depthwise:
        if in_ch != 1 or out_ch != x.channels:
            raise ValueError(f"Depthwise weights {weights.dims} do not match "
                             f"{x.channels} input channels")
    elif in_ch != x.channels:
        raise ValueError(f"Weights expect {in_ch} input channels, input has {x.channels}")
    return k_rows


def conv2d_accumulate(x: Tensor4D, weights: Tensor4D, stride: int = 1,
                      padding: Padding = 0, pad_mode: PadMode = PadMode.ZERO,
                      depthwise: bool = False) -> np.ndarray:
    """
    Raw convolution accumulators, before bias and requantization.

    For fixed-point operands the result is an `int64` array at scale
    `x.fmt.fraction_bits + weights.fmt.fraction_bits`; for real operands it
    is a `float64` array.

    Args:
        x: Input tensor (n, c, h, w).
        weights: Filters (m, c, k, k), or (c, 1, k, k) if `depthwise`.
        stride: Window stride.
        padding: Per-side padding, see `normalize_padding`.
        pad_mode: How padded positions are filled.
        depthwise: Convolve every channel with its own filter.

    Returns:
        An array of shape (n, m, h_out, w_out).
    """
    k = _check_conv_operands(x, weights, depthwise)
    top, bottom, left, right = normalize_padding(padding)
    out_rows = conv_output_extent(x.height, k, stride, top, bottom)
    out_cols = conv_output_extent(x.width, k, stride, left, right)
    padded = pad(x, (top, bottom, left, right), pad_mode).data
    # (n, c, rows, cols, k, k) view of all windows
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_rows, :out_cols]
    kernel = weights.data
    if x.fmt.is_fixed:
        fan_in = k * k * (1 if depthwise else x.channels)
        bound = (int(np.abs(padded).max(initial=0)) * int(np.abs(kernel).max(initial=0))
                 * fan_in)
        if bound < _EXACT_FLOAT_LIMIT:
            # Every partial sum is an exact float64 integer
            windows = windows.astype(np.float64)
            kernel = kernel.astype(np.float64)
        else:
            logging.debug("Accumulating in int64, magnitude bound %d", bound)
    if depthwise:
        acc = np.einsum("nchwij,cij->nchw", windows, kernel[:, 0])
    else:
        acc = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if x.fmt.is_fixed:
        return np.rint(acc).astype(np.int64) if acc.dtype != np.int64 else acc
    return np.ascontiguousarray(acc, dtype=np.float64)


def requantize(acc: np.ndarray, in_fmt: ScalarFormat, weight_fmt: ScalarFormat,
               out_fmt: Optional[ScalarFormat] = None, bias: Optional[np.ndarray] = None,
               relu: bool = False) -> Tensor4D:
    """
    Turn convolution accumulators into an output tensor.

    Args:
        acc: Accumulators from `conv2d_accumulate`.
        in_fmt: Format of the convolution input.
        weight_fmt: Format of the weights.
        out_fmt: Output format (default: `in_fmt`).
        bias: Optional per-output-channel bias; for fixed formats an integer
          vector at the accumulator scale.
        relu: Clamp negative results to zero.

    Returns:
        The requantized and saturated output tensor.
    """
    out_fmt = out_fmt or in_fmt
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (acc.shape[1],):
            raise ValueError(f"Bias of shape {bias.shape} for {acc.shape[1]} channels")
        acc = acc + bias.astype(acc.dtype)[None, :, None, None]
    if out_fmt.is_fixed:
        if not in_fmt.is_fixed:
            raise ValueError(f"Cannot requantize {in_fmt} accumulators to {out_fmt}")
        shift = in_fmt.fraction_bits + weight_fmt.fraction_bits - out_fmt.fraction_bits
        values = shift_round(acc, shift)
        if relu:
            values = np.maximum(values, 0)
        return Tensor4D(out_fmt.saturate(values), out_fmt)
    values = acc.astype(np.float64)
    if in_fmt.is_fixed:
        values = values / (1 << (in_fmt.fraction_bits + weight_fmt.fraction_bits))
    if relu:
        values = np.maximum(values, 0.0)
    return Tensor4D(values, out_fmt)


# pylint: disable=too-many-arguments
def conv2d_ref(x: Tensor4D, weights: Tensor4D, bias: Optional[np.ndarray] = None,
               stride: int = 1, padding: Padding = 0, pad_mode: PadMode = PadMode.ZERO,
               depthwise: bool = False, relu: bool = False,
               out_fmt: Optional[ScalarFormat] = None) -> Tensor4D:
    """
    Reference 2D convolution.

    The output extent along each axis is
    `(extent + pad_lead + pad_trail - k) // stride + 1`.

    Args:
        x: Input tensor (n, c, h, w).
        weights: Filters (m, c, k, k), or (c, 1, k, k) if `depthwise`.
        bias: Optional per-output-channel bias, see `requantize`.
        stride: Window stride.
        padding: Per-side padding, see `normalize_padding`.
        pad_mode: How padded positions are filled.
        depthwise: Convolve every channel with its own filter.
        relu: Apply ReLU after requantization.
        out_fmt: Output format (default: the input format).

    Returns:
        The output tensor (n, m, h_out, w_out).
    """
    acc = conv2d_accumulate(x, weights, stride=stride, padding=padding,
                            pad_mode=pad_mode, depthwise=depthwise)
    return requantize(acc, x.fmt, weights.fmt, out_fmt=out_fmt, bias=bias, relu=relu)


def maxpool2d(x: Tensor4D, k: int, stride: Optional[int] = None) -> Tensor4D:
    """Max pooling with a `k`x`k` window and no padding (`stride` defaults to `k`)."""
    stride = k if stride is None else stride
    if k > x.height or k > x.width:
        raise ValueError(f"Pooling window {k} larger than {x.height}x{x.width}")
    out_rows = conv_output_extent(x.height, k, stride, 0, 0)
    out_cols = conv_output_extent(x.width, k, stride, 0, 0)
    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_rows, :out_cols]
    return Tensor4D(windows.max(axis=(4, 5)), x.fmt)


def eltwise_add(a: Tensor4D, b: Tensor4D, relu: bool = False) -> Tensor4D:
    """Element-wise saturating sum of two tensors with equal dimensions and format."""
    if a.dims != b.dims:
        raise ValueError(f"Cannot add tensors of dimensions {a.dims} and {b.dims}")
    if a.fmt != b.fmt:
        raise ValueError(f"Cannot add tensors of formats {a.fmt} and {b.fmt}")
    total = a.data + b.data
    if relu:
        total = np.maximum(total, 0)
    return Tensor4D(a.fmt.saturate(total), a.fmt)


@dataclass(frozen=True)
class MacCount:
    """Kernel applications (k x k window evaluations) and multiply-accumulates."""
    kernel_applications: int
    macs: int

    def __add__(self, other: MacCount) -> MacCount:
        return MacCount(self.kernel_applications + other.kernel_applications,
                        self.macs + other.macs)


def mac_count(in_shape: Sequence[int], k: int, out_ch: int = 1, stride: int = 1,
              padding: Padding = 0, depthwise: bool = False) -> MacCount:
    """
    Count the work of a convolution.

    Args:
        in_shape: Input shape (c, h, w).
        k: Kernel size.
        out_ch: Number of filters (ignored if `depthwise`).
        stride: Window stride.
        padding: Per-side padding, see `normalize_padding`.
        depthwise: Convolve every channel with its own filter.

    Returns:
        A MacCount with `h_out * w_out * c * m` kernel applications
        (`h_out * w_out * c` if depthwise), each of `k * k` MACs.
    """
    channels, rows, cols = (int(d) for d in in_shape)
    top, bottom, left, right = normalize_padding(padding)
    out_rows = conv_output_extent(rows, k, stride, top, bottom)
    out_cols = conv_output_extent(cols, k, stride, left, right)
    applications = out_rows * out_cols * channels * (1 if depthwise else out_ch)
    return MacCount(applications, applications * k * k)


def random_tensor(dims: Sequence[int], fmt: ScalarFormat,
                  rng: np.random.Generator) -> Tensor4D:
    """A random tensor: uniform over the whole range (fixed) or standard normal (real)."""
    if fmt.is_fixed:
        data = rng.integers(fmt.min_value, fmt.max_value, size=tuple(dims), endpoint=True)
    else:
        data = rng.standard_normal(size=tuple(dims))
    return Tensor4D(data, fmt)
