"""Blocked tensors and the relational-style kernels that operate on them.

A tensor is split into equally shaped blocks keyed by their position along
each dimension. Matrix multiplication is a join on the shared block index
followed by a grouped sum, addition is a join on equal keys, and activations
are per-block transforms.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, NamedTuple

import numpy as np

from .errors import ShapeError

ELEMENT_KINDS = ("float64", "float32")

# Quantile used by magnitude_score. "quartile" is the upper quartile of |w|;
# "percentile" takes the literal 3rd percentile instead.
MAGNITUDE_QUANTILES = {"quartile": 0.75, "percentile": 0.03}


@dataclass(frozen=True)
class TensorMeta:
    tensor_id: int
    dims: tuple[int, ...]
    block_shape: tuple[int, ...]
    element_kind: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "block_shape", tuple(int(b) for b in self.block_shape))
        if len(self.dims) == 0 or len(self.dims) != len(self.block_shape):
            raise ShapeError(
                f"dims {self.dims} and block_shape {self.block_shape} must have equal length >= 1"
            )
        if any(d <= 0 for d in self.dims) or any(b <= 0 for b in self.block_shape):
            raise ShapeError(f"dims {self.dims} and block_shape {self.block_shape} must be positive")
        bad = [i for i, (d, b) in enumerate(zip(self.dims, self.block_shape)) if d % b]
        if bad:
            detail = ", ".join(f"dim {i}: {self.dims[i]} % {self.block_shape[i]} != 0" for i in bad)
            raise ShapeError(f"tensor {self.tensor_id} is not evenly blocked ({detail})")
        if self.element_kind not in ELEMENT_KINDS:
            raise ShapeError(f"unsupported element kind {self.element_kind!r}")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def grid(self) -> tuple[int, ...]:
        """Number of blocks along each dimension."""
        return tuple(d // b for d, b in zip(self.dims, self.block_shape))

    @property
    def num_blocks(self) -> int:
        return math.prod(self.grid)

    @property
    def block_size(self) -> int:
        return math.prod(self.block_shape)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.element_kind)

    def block_indices(self) -> Iterator[tuple[int, ...]]:
        """All block positions in row-major order."""
        return iter(np.ndindex(*self.grid))

    def with_id(self, tensor_id: int) -> TensorMeta:
        return TensorMeta(tensor_id, self.dims, self.block_shape, self.element_kind)


class BlockKey(NamedTuple):
    tensor_id: int
    block_index: tuple[int, ...]


class BlockedTensor:
    """A tensor held as a mapping from block position to block array.

    Blocks are stored with shape ``meta.block_shape``; ``values.ravel()``
    gives the row-major element vector.
    """

    __slots__ = ("meta", "blocks")

    def __init__(self, meta: TensorMeta, blocks: Mapping[tuple[int, ...], np.ndarray]):
        self.meta = meta
        self.blocks = dict(blocks)

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.items())

    def items(self) -> Iterator[tuple[BlockKey, np.ndarray]]:
        tid = self.meta.tensor_id
        for idx in sorted(self.blocks):
            yield BlockKey(tid, idx), self.blocks[idx]

    def block(self, index) -> np.ndarray:
        return self.blocks[tuple(index)]

    def to_dense(self) -> np.ndarray:
        return assemble_tensor(self.items(), self.meta)

    def __repr__(self):
        m = self.meta
        return f"BlockedTensor(id={m.tensor_id}, dims={m.dims}, block_shape={m.block_shape})"


def _block_slices(index, block_shape):
    return tuple(slice(i * b, (i + 1) * b) for i, b in zip(index, block_shape))


def block_tensor(dense, meta: TensorMeta) -> BlockedTensor:
    """Split a dense array (flat row-major or already shaped) into blocks."""
    arr = np.asarray(dense, dtype=meta.dtype)
    expected = math.prod(meta.dims)
    if arr.size != expected:
        raise ShapeError(
            f"tensor {meta.tensor_id}: got {arr.size} elements {arr.shape}, "
            f"dims {meta.dims} need {expected}"
        )
    if arr.shape != meta.dims:
        if arr.ndim != 1:
            raise ShapeError(f"tensor {meta.tensor_id}: array shape {arr.shape} != dims {meta.dims}")
        arr = arr.reshape(meta.dims)
    blocks = {
        idx: arr[_block_slices(idx, meta.block_shape)].copy() for idx in meta.block_indices()
    }
    return BlockedTensor(meta, blocks)


def assemble_tensor(blocks: Iterable[tuple[BlockKey, np.ndarray]], meta: TensorMeta) -> np.ndarray:
    """Inverse of block_tensor. The blocks must form a complete, duplicate-free grid."""
    out = np.empty(meta.dims, dtype=meta.dtype)
    grid = meta.grid
    seen = set()
    for key, values in blocks:
        key = BlockKey(key[0], tuple(key[1]))
        if key.tensor_id != meta.tensor_id:
            raise ShapeError(f"block {key} does not belong to tensor {meta.tensor_id}")
        idx = key.block_index
        if len(idx) != meta.ndim or any(not 0 <= i < g for i, g in zip(idx, grid)):
            raise ShapeError(f"block {key} is outside grid {grid}")
        if idx in seen:
            raise ShapeError(f"duplicate block {key}")
        seen.add(idx)
        values = np.asarray(values)
        if values.size != meta.block_size:
            raise ShapeError(f"block {key} has {values.size} elements, expected {meta.block_size}")
        out[_block_slices(idx, meta.block_shape)] = values.reshape(meta.block_shape)
    if len(seen) != meta.num_blocks:
        missing = next(i for i in meta.block_indices() if i not in seen)
        raise ShapeError(
            f"tensor {meta.tensor_id} is missing {meta.num_blocks - len(seen)} block(s), "
            f"first missing {BlockKey(meta.tensor_id, missing)}"
        )
    return out


def magnitude_score(block, mode: str = "quartile") -> float:
    """Nearest-rank quantile of the absolute element values of a block.

    The default takes the upper quartile so a few large weights dominate the
    score of an otherwise small block.
    """
    q = MAGNITUDE_QUANTILES[mode]
    a = np.sort(np.abs(np.asarray(block, dtype=np.float64).ravel()))
    if a.size == 0:
        raise ShapeError("cannot score an empty block")
    rank = max(1, math.ceil(q * a.size))
    return float(a[rank - 1])


def _require_2d(t: BlockedTensor, name: str):
    if t.meta.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got dims {t.meta.dims}")


def blocked_matmul(a: BlockedTensor, b: BlockedTensor, tensor_id: int = 0) -> BlockedTensor:
    """A @ B as a join on A's column index = B's row index, then a grouped sum."""
    _require_2d(a, "A")
    _require_2d(b, "B")
    if a.meta.dims[1] != b.meta.dims[0] or a.meta.block_shape[1] != b.meta.block_shape[0]:
        raise ShapeError(
            f"cannot multiply dims {a.meta.dims} (blocks {a.meta.block_shape}) by "
            f"{b.meta.dims} (blocks {b.meta.block_shape})"
        )
    by_row = defaultdict(list)
    for (r, c), blk in b.blocks.items():
        by_row[r].append((c, blk))

    groups: dict[tuple[int, int], np.ndarray] = {}
    for (i, k), ablk in sorted(a.blocks.items()):
        for j, bblk in by_row[k]:
            prod = ablk @ bblk
            acc = groups.get((i, j))
            groups[(i, j)] = prod if acc is None else acc + prod

    dtype = np.result_type(a.meta.dtype, b.meta.dtype)
    meta = TensorMeta(
        tensor_id,
        (a.meta.dims[0], b.meta.dims[1]),
        (a.meta.block_shape[0], b.meta.block_shape[1]),
        dtype.name,
    )
    return BlockedTensor(meta, {k: v.astype(dtype, copy=False) for k, v in groups.items()})


def blocked_add(a: BlockedTensor, b: BlockedTensor) -> BlockedTensor:
    if (a.meta.dims, a.meta.block_shape) != (b.meta.dims, b.meta.block_shape):
        raise ShapeError(
            f"cannot add dims {a.meta.dims} (blocks {a.meta.block_shape}) and "
            f"{b.meta.dims} (blocks {b.meta.block_shape})"
        )
    return BlockedTensor(a.meta, {k: v + b.blocks[k] for k, v in a.blocks.items()})


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


TRANSFORMS = {
    "relu": lambda x: np.maximum(x, 0),
    "sigmoid": _sigmoid,
    "tanh": np.tanh,
}


def apply_transform(t: BlockedTensor, kind: str) -> BlockedTensor:
    try:
        fn = TRANSFORMS[kind]
    except KeyError:
        raise ValueError(f"unknown transform {kind!r}; expected one of {sorted(TRANSFORMS)}") from None
    return BlockedTensor(t.meta, {k: fn(v) for k, v in t.blocks.items()})
