"""
Shapes, dense and binary tensors, token gather/scatter, top-k and the SPKT tensor file.

Everything the other modules exchange goes through DenseTensor (float32) or
SpikeTensor ({0,1} bytes). Both are frozen after construction: the backing
numpy array is marked read-only.
"""
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .efficiency import count_linear
from .errors import InvalidArgumentError, ShapeError, TensorFileError, TokenIndexError

MAX_RANK = 5
INT64_MAX = 2**63 - 1

# Weights produced by the model builder live on this dyadic grid so that spike
# accumulations are exact in any summation order.
WEIGHT_GRID_BITS = 12
_EXACT_SUM_LIMIT = 2.0 ** (24 - WEIGHT_GRID_BITS - 1)

TENSOR_MAGIC = b"SPKT"
TENSOR_VERSION = 1
DTYPE_FLOAT32 = 0
DTYPE_BINARY = 1


class LedgerSink(Protocol):
    def credit(self, label: str, spike_accumulates: int = 0, dense_macs: int = 0) -> None:
        ...


@dataclass(frozen=True)
class Shape:
    dims: Tuple[int, ...]

    def __post_init__(self):
        dims = tuple(self.dims)
        if not 1 <= len(dims) <= MAX_RANK:
            raise ShapeError(f"rank must be between 1 and {MAX_RANK}, got {len(dims)}")
        count = 1
        for extent in dims:
            if isinstance(extent, bool) or int(extent) != extent or extent < 1:
                raise ShapeError(f"every extent must be a positive integer, got {dims}")
            count *= int(extent)
        if count > INT64_MAX:
            raise ShapeError(f"element count of {dims} overflows a 64-bit count")
        object.__setattr__(self, "dims", tuple(int(d) for d in dims))

    @classmethod
    def of(cls, *dims: int) -> "Shape":
        return cls(tuple(dims))

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        count = 1
        for extent in self.dims:
            count *= extent
        return count

    def __iter__(self):
        return iter(self.dims)

    def __len__(self):
        return len(self.dims)

    def __getitem__(self, item):
        return self.dims[item]

    def __str__(self):
        return "[" + ",".join(str(d) for d in self.dims) + "]"


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


class DenseTensor:
    """Real-valued tensor, float32, row-major, finite everywhere."""

    __slots__ = ("shape", "data")

    def __init__(self, data, copy: bool = True):
        if copy:
            array = np.array(data, dtype=np.float32, order="C")
        else:
            array = np.ascontiguousarray(data, dtype=np.float32)
        if array.ndim == 0:
            array = array.reshape(1)
        self.shape = Shape(array.shape)
        if not np.all(np.isfinite(array)):
            raise InvalidArgumentError("DenseTensor values must be finite (no NaN/Inf)")
        self.data = _frozen(array)

    @classmethod
    def zeros(cls, *dims: int) -> "DenseTensor":
        return cls(np.zeros(Shape(dims).dims, dtype=np.float32), copy=False)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"DenseTensor(shape={self.shape})"

    def __eq__(self, other):
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


class SpikeTensor:
    """Binary activation tensor; every element is exactly 0 or 1."""

    __slots__ = ("shape", "data")

    def __init__(self, data, copy: bool = True):
        source = np.asarray(data)
        if source.dtype == np.bool_:
            array = np.array(source, dtype=np.uint8, order="C")
        else:
            if not np.all((source == 0) | (source == 1)):
                raise InvalidArgumentError("SpikeTensor values must be 0 or 1")
            if copy:
                array = np.array(source, dtype=np.uint8, order="C")
            else:
                array = np.ascontiguousarray(source, dtype=np.uint8)
        if array.ndim == 0:
            array = array.reshape(1)
        self.shape = Shape(array.shape)
        self.data = _frozen(array)

    @classmethod
    def zeros(cls, *dims: int) -> "SpikeTensor":
        return cls(np.zeros(Shape(dims).dims, dtype=np.uint8), copy=False)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.data))

    def numpy(self) -> np.ndarray:
        return self.data

    def to_dense(self) -> DenseTensor:
        return DenseTensor(self.data.astype(np.float32), copy=False)

    def __repr__(self):
        return f"SpikeTensor(shape={self.shape}, nnz={self.nnz})"

    def __eq__(self, other):
        if not isinstance(other, SpikeTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


Tensor = Union[DenseTensor, SpikeTensor]


def _rewrap(like: Tensor, array: np.ndarray) -> Tensor:
    if isinstance(like, SpikeTensor):
        return SpikeTensor(array, copy=False)
    return DenseTensor(array, copy=False)


def flatten_spatial(x: SpikeTensor) -> SpikeTensor:
    """[T,B,C,H,W] -> [T,B,H*W,C]; token (h, w) lands at index h*W + w."""
    if x.shape.rank != 5:
        raise ShapeError(f"flatten_spatial expects rank 5 [T,B,C,H,W], got {x.shape}")
    t, b, c, h, w = x.shape.dims
    tokens = np.ascontiguousarray(x.data.transpose(0, 1, 3, 4, 2)).reshape(t, b, h * w, c)
    return _rewrap(x, tokens)


def unflatten_tokens(x: Tensor, height: int, width: int) -> Tensor:
    """Inverse of flatten_spatial: [T,B,H*W,C] -> [T,B,C,H,W]."""
    if x.shape.rank != 4:
        raise ShapeError(f"unflatten_tokens expects rank 4 [T,B,N,C], got {x.shape}")
    t, b, n, c = x.shape.dims
    if height * width != n:
        raise ShapeError(f"{height}x{width} grid does not hold {n} tokens")
    grid = x.data.reshape(t, b, height, width, c).transpose(0, 1, 4, 2, 3)
    return _rewrap(x, np.ascontiguousarray(grid))


def _check_indices(idx, n_tokens: int, batch: Optional[int] = None) -> np.ndarray:
    index = np.asarray(idx)
    if index.size and not np.issubdtype(index.dtype, np.integer):
        raise TokenIndexError("token indices must be integers")
    index = index.astype(np.int64)
    if index.ndim == 1:
        rows = index[None, :]
    elif index.ndim == 2:
        if batch is not None and index.shape[0] != batch:
            raise ShapeError(f"per-sample index rows ({index.shape[0]}) must match batch ({batch})")
        rows = index
    else:
        raise TokenIndexError("token indices must be a list or a [B,K] table")
    if rows.shape[1]:
        if rows.min() < 0 or rows.max() >= n_tokens:
            raise TokenIndexError(f"token index out of range for N={n_tokens}")
        if rows.shape[1] > 1 and np.any(np.diff(rows, axis=1) <= 0):
            raise TokenIndexError("token indices must be strictly increasing")
    return index


def gather_tokens(x: Tensor, idx) -> Tensor:
    """
    Copy the rows named by idx out of a [T,B,N,D] tensor.

    idx is either one ascending index list shared by every sample, or a [B,K]
    table holding one ascending list per sample. Timesteps always share rows.
    """
    if x.shape.rank != 4:
        raise ShapeError(f"gather_tokens expects rank 4 [T,B,N,D], got {x.shape}")
    t, b, n, d = x.shape.dims
    index = _check_indices(idx, n, batch=b)
    if index.shape[-1] == 0:
        raise ShapeError("gather_tokens needs at least one index")
    if index.ndim == 1:
        out = x.data[:, :, index, :]
    else:
        take = np.broadcast_to(index[None, :, :, None], (t, b, index.shape[1], d))
        out = np.take_along_axis(x.data, take, axis=2)
    return _rewrap(x, np.ascontiguousarray(out))


def scatter_tokens(src: Tensor, idx, base: Tensor) -> Tensor:
    """Replace the rows of base named by idx with the rows of src; other rows stay."""
    if src.shape.rank != 4 or base.shape.rank != 4:
        raise ShapeError("scatter_tokens expects rank 4 [T,B,K,D] and [T,B,N,D] tensors")
    t, b, n, d = base.shape.dims
    index = _check_indices(idx, n, batch=b)
    k = index.shape[-1]
    if src.shape.dims != (t, b, k, d):
        raise ShapeError(f"source {src.shape} does not match {k} indices into {base.shape}")
    if type(src) is not type(base):
        raise ShapeError("scatter_tokens needs src and base of the same tensor kind")
    out = np.array(base.data, copy=True)
    if index.ndim == 1:
        out[:, :, index, :] = src.data
    else:
        put = np.broadcast_to(index[None, :, :, None], (t, b, k, d))
        np.put_along_axis(out, put, src.data, axis=2)
    return _rewrap(base, out)


def topk_indices(scores: Sequence[float], k: int) -> np.ndarray:
    """
    Indices of the k largest scores, ties to the smaller index, returned ascending.

    Raises:
    InvalidArgumentError: k outside [0, N] or a non-finite score.
    """
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError("topk_indices needs finite scores")
    if k < 0 or k > values.size:
        raise InvalidArgumentError(f"k={k} must lie in [0, {values.size}]")
    # stable sort on the negated score keeps equal scores in index order
    order = np.argsort(-values, kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def quantize_to_grid(values: np.ndarray) -> np.ndarray:
    """Round to the dyadic weight grid (multiples of 2**-WEIGHT_GRID_BITS), float32."""
    scale = float(2**WEIGHT_GRID_BITS)
    return (np.round(np.asarray(values, dtype=np.float64) * scale) / scale).astype(np.float32)


def on_weight_grid(w: np.ndarray) -> bool:
    """True when ascending-k float32 accumulation of w rows is exact for any spike pattern."""
    scaled = w.astype(np.float64) * float(2**WEIGHT_GRID_BITS)
    if not np.array_equal(scaled, np.round(scaled)):
        return False
    return float(np.abs(w.astype(np.float64)).sum(axis=0).max(initial=0.0)) < _EXACT_SUM_LIMIT


def _accumulate_ascending(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], w.shape[1]), dtype=np.float32)
    for k in range(a.shape[1]):
        active = a[:, k] != 0
        if active.any():
            out[active] += w[k]
    return out


def spike_rows_matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """
    Raw-array kernel behind spike_dense_matmul: binary [M,K] times float32 [K,P].

    Grid weights take the BLAS path, whose float64 sums are exact and therefore
    equal to the ascending-k float32 loop; other weights run the loop itself.
    """
    if on_weight_grid(w):
        return (a.astype(np.float64) @ w.astype(np.float64)).astype(np.float32)
    return _accumulate_ascending(a, w)


def spike_dense_matmul(
    a: SpikeTensor,
    w: DenseTensor,
    ledger: Optional[LedgerSink] = None,
    label: str = "matmul",
) -> DenseTensor:
    """
    out[m,p] = sum over ascending k of a[m,k] * w[k,p].

    A supplied ledger is credited nnz(a) * P spike-accumulates under label.
    """
    if a.shape.rank != 2 or w.shape.rank != 2:
        raise ShapeError(f"spike_dense_matmul expects [M,K] and [K,P], got {a.shape} and {w.shape}")
    if a.shape[1] != w.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {w.shape}")
    out = spike_rows_matmul(a.data, w.data)
    if ledger is not None:
        ledger.credit(label, spike_accumulates=count_linear(a.nnz, w.shape[1]))
    return DenseTensor(out, copy=False)


def reduce_mean_std(x: Iterable[float]) -> Tuple[float, float]:
    """Population mean and standard deviation (divisor T), accumulated in float64."""
    values = np.asarray(list(x) if not isinstance(x, np.ndarray) else x, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise InvalidArgumentError("reduce_mean_std needs at least one value")
    mean = values.sum() / values.size
    std = np.sqrt(((values - mean) ** 2).sum() / values.size)
    return float(mean), float(std)


# --- TensorFile -------------------------------------------------------------

_HEADER = struct.Struct("<4sBBBB")
MAX_FILE_EXTENT = 2**32 - 1


def pack_header(dtype: int, dims: Tuple[int, ...]) -> bytes:
    """Fixed header plus one little-endian u32 per extent."""
    if not 1 <= len(dims) <= MAX_RANK:
        raise TensorFileError(f"cannot store rank {len(dims)}; the file format holds 1 to {MAX_RANK}")
    too_wide = [d for d in dims if not 0 <= d <= MAX_FILE_EXTENT]
    if too_wide:
        raise TensorFileError(f"extents {too_wide} of {tuple(dims)} do not fit the 32-bit fields of a tensor file")
    return _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, dtype, len(dims), 0) + struct.pack(f"<{len(dims)}I", *dims)


def encode_tensor(tensor: Tensor) -> bytes:
    if isinstance(tensor, SpikeTensor):
        dtype = DTYPE_BINARY
    elif isinstance(tensor, DenseTensor):
        dtype = DTYPE_FLOAT32
    else:
        raise TensorFileError(f"cannot encode {type(tensor).__name__}")
    header = pack_header(dtype, tensor.shape.dims)
    if dtype == DTYPE_BINARY:
        payload = tensor.data.astype(np.uint8).tobytes(order="C")
    else:
        payload = tensor.data.astype("<f4").tobytes(order="C")
    return header + payload


def decode_tensor(blob: bytes) -> Tensor:
    if len(blob) < _HEADER.size:
        raise TensorFileError("tensor file is truncated")
    magic, version, dtype, rank, reserved = _HEADER.unpack_from(blob, 0)
    if magic != TENSOR_MAGIC:
        raise TensorFileError(f"bad magic {magic!r}")
    if version != TENSOR_VERSION or reserved != 0:
        raise TensorFileError(f"unsupported tensor file version {version}")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFileError(f"bad rank {rank}")
    offset = _HEADER.size
    if len(blob) < offset + 4 * rank:
        raise TensorFileError("tensor file is truncated")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    try:
        shape = Shape(dims)
    except ShapeError as e:
        raise TensorFileError(str(e)) from e
    if dtype == DTYPE_FLOAT32:
        expected = 4 * shape.size
        np_dtype = np.dtype("<f4")
    elif dtype == DTYPE_BINARY:
        expected = shape.size
        np_dtype = np.dtype(np.uint8)
    else:
        raise TensorFileError(f"unknown dtype code {dtype}")
    if len(blob) - offset != expected:
        raise TensorFileError(f"payload holds {len(blob) - offset} bytes, expected {expected}")
    array = np.frombuffer(blob, dtype=np_dtype, count=shape.size, offset=offset).reshape(shape.dims)
    try:
        if dtype == DTYPE_BINARY:
            return SpikeTensor(array)
        return DenseTensor(array.astype(np.float32))
    except InvalidArgumentError as e:
        raise TensorFileError(str(e)) from e


def write_tensor(path: Union[str, Path], tensor: Tensor) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def read_tensor(path: Union[str, Path]) -> Tensor:
    return decode_tensor(Path(path).read_bytes())
