"""Dense tensor substrate: image tensors, matrix views, softmax, matmul, file I/O.

Image tensors are channel-major (c, h, w) buffers in row-major order. Matrices
are the flattened views used by the attention math, where a spatial position
(i, j) maps to flat column i * w + j (scan-line order).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError

SUPPORTED_DTYPES = (np.float32, np.float64)

MAGIC = b"GPAT"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


def _check_dtype(arr: np.ndarray, what: str) -> None:
    if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"{what} must be float32 or float64, got {arr.dtype}")


@dataclass(frozen=True)
class ImageTensor:
    """A c x h x w image tensor. Treated as immutable by every operation."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"image tensor must be 3-d (c, h, w), got ndim={self.data.ndim}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"image tensor dims must be positive, got {self.data.shape}")
        _check_dtype(self.data, "image tensor")
        if not self.data.flags.c_contiguous:
            object.__setattr__(self, "data", np.ascontiguousarray(self.data))

    @classmethod
    def from_array(cls, arr: np.ndarray, dtype=None) -> "ImageTensor":
        """Build from external data, enforcing finiteness of every element."""
        arr = np.asarray(arr)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise ShapeError("image tensor contains non-finite elements")
        return cls(np.ascontiguousarray(arr))

    @property
    def c(self) -> int:
        return self.data.shape[0]

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype


@dataclass(frozen=True)
class Matrix:
    """A rows x cols matrix over the same dtypes as ImageTensor."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeError(f"matrix must be 2-d, got ndim={self.data.ndim}")
        _check_dtype(self.data, "matrix")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def flatten(x: ImageTensor) -> Matrix:
    """View a (c, h, w) tensor as a c x (h*w) matrix in scan-line column order."""
    return Matrix(x.data.reshape(x.c, x.h * x.w))


def unflatten(m: Matrix, h: int, w: int) -> ImageTensor:
    """Inverse of flatten for a known spatial shape."""
    if m.cols != h * w:
        raise ShapeError(f"cannot unflatten {m.rows}x{m.cols} matrix to h={h}, w={w}")
    return ImageTensor(np.ascontiguousarray(m.data).reshape(m.rows, h, w))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product a @ b."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul dimension mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    return Matrix(a.data @ b.data)


def softmax_columns_inplace(s: np.ndarray) -> np.ndarray:
    """Column softmax on a raw 2-d score buffer, stabilized, destroying the input."""
    s -= s.max(axis=0, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=0, keepdims=True)
    return s


def softmax_over_keys(s: Matrix) -> Matrix:
    """Softmax over the key axis (rows) of a keys x queries score matrix.

    Every output column is a probability distribution over keys; the
    per-column maximum is subtracted before exponentiation for stability.
    """
    return Matrix(softmax_columns_inplace(s.data.copy()))


def _write_array(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES[arr.dtype]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BBB", FORMAT_VERSION, code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_array(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes, not a tensor file")
    if len(raw) < 7:
        raise FormatError(f"{path}: truncated header")
    version, code, rank = struct.unpack("<BBB", raw[4:7])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if len(raw) < 7 + 8 * rank:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{rank}Q", raw[7 : 7 + 8 * rank])
    dtype = _CODE_DTYPES[code]
    payload = raw[7 + 8 * rank :]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype, copy=True)
    return arr.reshape(dims)


def write_tensor(path, x: ImageTensor) -> None:
    """Write an image tensor in the binary tensor file format."""
    _write_array(path, x.data)


def read_tensor(path) -> ImageTensor:
    """Read a rank-3 tensor file; round-trips with write_tensor bit-exactly."""
    arr = _read_array(path)
    if arr.ndim != 3:
        raise FormatError(f"{path}: expected rank 3, got rank {arr.ndim}")
    if not np.isfinite(arr).all():
        raise FormatError(f"{path}: tensor contains non-finite elements")
    return ImageTensor(arr)
