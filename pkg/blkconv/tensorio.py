"""
Tensor files.

Binary layout (all integers little-endian):

    offset  size  content
    0       4     magic b"BCT1"
    4       1     kind: 0 = real64, 1 = fixed
    5       1     bitwidth (64 for real64)
    6       1     fraction bits
    7       1     reserved, 0
    8       16    dims n, c, h, w as uint32
    24      ...   values in NCHW row-major order: float64 for real64,
                  int8 for fixed formats up to 8 bits, int16 for fixed16

A JSON dump with keys `dims`, `format` and `data` (flat value list) is
available for debugging; it can be read back too.
"""
import json
import logging
import struct

import numpy as np

from .tensors import ScalarFormat, Tensor4D


MAGIC = b"BCT1"
_HEADER = struct.Struct("<4sBBBB4I")


class TensorFileError(ValueError):
    """A tensor file is missing, truncated or malformed."""


def _value_dtype(fmt: ScalarFormat) -> np.dtype:
    if not fmt.is_fixed:
        return np.dtype("<f8")
    return np.dtype("<i1") if fmt.bitwidth <= 8 else np.dtype("<i2")


def tensor_to_bytes(tensor: Tensor4D) -> bytes:
    """Encode a tensor in the binary layout."""
    fmt = tensor.fmt
    header = _HEADER.pack(MAGIC, 1 if fmt.is_fixed else 0, fmt.bitwidth,
                          fmt.fraction_bits, 0, *tensor.dims)
    return header + tensor.data.astype(_value_dtype(fmt)).tobytes(order="C")


def tensor_from_bytes(raw: bytes) -> Tensor4D:
    """Decode a tensor from the binary layout."""
    if len(raw) < _HEADER.size:
        raise TensorFileError(f"Truncated tensor header ({len(raw)} bytes)")
    magic, kind, bitwidth, fraction_bits, _reserved, *dims = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TensorFileError(f"Not a tensor file: bad magic {magic!r}")
    try:
        fmt = (ScalarFormat.fixed(bitwidth, fraction_bits) if kind == 1
               else ScalarFormat.real() if kind == 0 and bitwidth == 64
               else None)
    except ValueError as error:
        raise TensorFileError(str(error)) from error
    if fmt is None:
        raise TensorFileError(f"Unknown scalar kind {kind} with bitwidth {bitwidth}")
    dtype = _value_dtype(fmt)
    count = int(np.prod(dims, dtype=np.int64))
    expected = _HEADER.size + count * dtype.itemsize
    if len(raw) != expected:
        raise TensorFileError(f"Tensor file has {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype=dtype, count=count, offset=_HEADER.size)
    try:
        return Tensor4D(values.reshape(dims), fmt)
    except ValueError as error:
        raise TensorFileError(str(error)) from error


def write_tensor(tensor: Tensor4D, file_path: str) -> None:
    """Write a tensor file, either binary or a JSON dump (by its `.json` extension)."""
    if file_path.endswith(".json"):
        dump_json(tensor, file_path)
        return
    with open(file_path, "wb") as file:
        file.write(tensor_to_bytes(tensor))
    logging.info("Written tensor %s to %s", tensor.dims, file_path)


def read_tensor(file_path: str) -> Tensor4D:
    """
    Read a tensor file, either binary or a JSON dump (by its `.json` extension).

    Raises:
        TensorFileError: The file cannot be read or parsed.
    """
    try:
        if file_path.endswith(".json"):
            with open(file_path, "r", encoding="utf-8") as file:
                return tensor_from_json(json.load(file))
        with open(file_path, "rb") as file:
            return tensor_from_bytes(file.read())
    except OSError as error:
        raise TensorFileError(f"Cannot read tensor file {file_path}: {error}") from error
    except json.JSONDecodeError as error:
        raise TensorFileError(f"Invalid JSON tensor file {file_path}: {error}") from error


def tensor_to_json(tensor: Tensor4D) -> dict:
    """A JSON-serializable dump of a tensor."""
    return {
        "dims": list(tensor.dims),
        "format": str(tensor.fmt),
        "data": tensor.data.ravel().tolist(),
    }


def tensor_from_json(content: dict) -> Tensor4D:
    """Rebuild a tensor from its JSON dump."""
    try:
        fmt = ScalarFormat.parse(content["format"])
        dims = tuple(int(d) for d in content["dims"])
        values = np.asarray(content["data"], dtype=fmt.dtype)
        return Tensor4D(values.reshape(dims), fmt)
    except (KeyError, TypeError, ValueError) as error:
        raise TensorFileError(f"Invalid tensor dump: {error}") from error


def dump_json(tensor: Tensor4D, file_path: str) -> None:
    """Write the JSON dump of a tensor."""
    with open(file_path, "w", encoding="utf-8") as file:
        json.dump(tensor_to_json(tensor), file)
    logging.info("Written JSON dump of tensor %s to %s", tensor.dims, file_path)
