"""Small ownership instances with known optimal packings."""

from __future__ import annotations

import numpy as np

from ..packing import Ownership
from ..store import StoredTensor
from ..tensor import TensorMeta

# Two tensors sharing twelve items, each with four private ones. Each tensor
# was written as four runs of one private item followed by three shared items.
TWO_TENSOR_SHARED = 12
TWO_TENSOR_PRIVATE = 4


def two_tensor_order() -> dict[int, list[int]]:
    shared = list(range(TWO_TENSOR_SHARED))
    first = range(12, 12 + TWO_TENSOR_PRIVATE)
    second = range(16, 16 + TWO_TENSOR_PRIVATE)
    order = {1: [], 2: []}
    for k, (p, q) in enumerate(zip(first, second)):
        run = shared[3 * k : 3 * k + 3]
        order[1] += [p, *run]
        order[2] += [q, *run]
    return order


def two_tensor_instance() -> Ownership:
    return Ownership(two_tensor_order())


def leftover_instance() -> Ownership:
    """One item shared by two tensors plus one private item each."""
    return Ownership({1: [0, 1], 2: [0, 2]})


def random_instance(rng: np.random.Generator, max_items=12, max_tensors=4, p=0.6) -> Ownership:
    """Random ownership where every item has an owner and every tensor an item."""
    m = int(rng.integers(1, max_items + 1))
    k = int(rng.integers(1, max_tensors + 1))
    a = rng.random((m, k)) < p
    for i in range(m):
        if not a[i].any():
            a[i, rng.integers(k)] = True
    for j in range(k):
        if not a[:, j].any():
            a[rng.integers(m), j] = True
    return Ownership({j: [i for i in range(m) if a[i, j]] for j in range(k)})


def stored_tensors(order: dict[int, list[int]], block_shape=(2, 2), kind="float64"):
    """Lay each item list out as a 1 x n grid of blocks so a store can hold it."""
    out = {}
    for t, items in order.items():
        meta = TensorMeta(t, (block_shape[0], block_shape[1] * len(items)), block_shape, kind)
        out[t] = StoredTensor(meta, {(0, j): item for j, item in enumerate(items)})
    return out


def item_blocks(items, block_shape=(2, 2), seed=0) -> dict[int, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {i: rng.standard_normal(block_shape) for i in sorted(items)}
