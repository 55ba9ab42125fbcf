"""Synthetic model families and the blocked FFNN used as the accuracy oracle."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import FormatError, ShapeError
from ..tensor import (
    BlockedTensor,
    TensorMeta,
    apply_transform,
    block_tensor,
    blocked_add,
    blocked_matmul,
)
from .oracles import dense_oracle_infer

FILE_VERSION = 1


def read_kv_file(path, kind: str) -> dict[str, str]:
    """Parse a versioned ``key=value`` file. Blank lines and ``#`` comments are allowed."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",))
    text = Path(path).read_text()
    try:
        parser.read_string(f"[{kind}]\n" + text)
    except configparser.Error as exc:
        raise FormatError(f"{path}: {exc}") from exc
    values = dict(parser[kind])
    version = values.pop("version", None)
    if version != str(FILE_VERSION):
        raise FormatError(f"{path}: expected version={FILE_VERSION}, got {version!r}")
    return values


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


@dataclass(frozen=True)
class ModelFamilySpec:
    num_models: int = 6
    layers: tuple[int, ...] = (64, 32, 8)
    block_shape: tuple[int, int] = (8, 8)
    seed: int = 0
    rho: float = 0.0
    validation_size: int = 256
    label_noise: float = 0.1

    def __post_init__(self):
        if self.num_models < 1:
            raise ValueError("num_models must be >= 1")
        if len(self.layers) < 2:
            raise ValueError("layers needs at least input and output widths")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError(f"label_noise must lie in [0, 1], got {self.label_noise}")
        if self.validation_size < 1:
            raise ValueError("validation_size must be >= 1")
        for i, (fan_in, fan_out) in enumerate(zip(self.layers, self.layers[1:])):
            # raises ShapeError naming the dimension that does not divide
            TensorMeta(i, (fan_in, fan_out), self.block_shape)

    @property
    def num_layers(self) -> int:
        return len(self.layers) - 1

    def tensor_id(self, model: int, layer: int) -> int:
        return model * self.num_layers + layer

    def weight_meta(self, model: int, layer: int) -> TensorMeta:
        dims = (self.layers[layer], self.layers[layer + 1])
        return TensorMeta(self.tensor_id(model, layer), dims, self.block_shape)

    @property
    def activations(self) -> list[str]:
        return ["relu"] * (self.num_layers - 1) + ["sigmoid"]

    @classmethod
    def from_file(cls, path) -> ModelFamilySpec:
        values = read_kv_file(path, "family")
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise FormatError(f"{path}: unknown keys {sorted(unknown)}")
        kwargs = {}
        try:
            for key, text in values.items():
                if key in ("layers", "block_shape"):
                    kwargs[key] = _ints(text)
                elif key in ("rho", "label_noise"):
                    kwargs[key] = float(text)
                else:
                    kwargs[key] = int(text)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        return cls(**kwargs)

    def to_text(self) -> str:
        return (
            f"version={FILE_VERSION}\n"
            f"num_models={self.num_models}\n"
            f"layers={','.join(map(str, self.layers))}\n"
            f"block_shape={','.join(map(str, self.block_shape))}\n"
            f"seed={self.seed}\n"
            f"rho={self.rho!r}\n"
            f"validation_size={self.validation_size}\n"
            f"label_noise={self.label_noise!r}\n"
        )


@dataclass
class Model:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def _random_layer(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)


def generate_family(spec: ModelFamilySpec) -> list[Model]:
    """A base model plus derived copies with ceil(rho * blocks) blocks per layer redrawn."""
    rng = np.random.default_rng([spec.seed, 0])
    base = Model([], [])
    for fan_in, fan_out in zip(spec.layers, spec.layers[1:]):
        base.weights.append(_random_layer(rng, fan_in, fan_out))
        base.biases.append(rng.standard_normal(fan_out) * 0.1)
    family = [base]
    bh, bw = spec.block_shape
    for m in range(1, spec.num_models):
        rng = np.random.default_rng([spec.seed, m])
        weights = []
        for layer, w in enumerate(base.weights):
            w = w.copy()
            grid = spec.weight_meta(m, layer).grid
            nblocks = grid[0] * grid[1]
            count = math.ceil(spec.rho * nblocks)
            for flat in np.sort(rng.choice(nblocks, count, replace=False)):
                i, j = divmod(int(flat), grid[1])
                fresh = rng.standard_normal((bh, bw)) / math.sqrt(w.shape[0])
                w[i * bh : (i + 1) * bh, j * bw : (j + 1) * bw] = fresh
            weights.append(w)
        family.append(Model(weights, [b.copy() for b in base.biases]))
    return family


def validation_set(spec: ModelFamilySpec, base: Model) -> tuple[np.ndarray, np.ndarray]:
    """Inputs labelled by the base model's argmax, with a fraction of labels replaced."""
    rng = np.random.default_rng([spec.seed, 10**6])
    x = rng.standard_normal((spec.validation_size, spec.layers[0]))
    y = np.argmax(dense_oracle_infer(base.weights, base.biases, x, spec.activations), axis=1)
    flip = rng.random(len(y)) < spec.label_noise
    y[flip] = rng.integers(0, spec.layers[-1], int(flip.sum()))
    return x, y


def _row_block(n: int) -> int:
    """Largest divisor of n that is at most 64, so inputs block evenly."""
    return max(d for d in range(1, min(n, 64) + 1) if n % d == 0)


def blocked_forward(
    weights: Sequence[BlockedTensor], biases: Sequence[np.ndarray], x: np.ndarray, activations: Sequence[str]
) -> np.ndarray:
    """FFNN inference built only from block joins, block sums and per-block transforms."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"inputs must be 2-D, got shape {x.shape}")
    n = x.shape[0]
    rows = _row_block(n)
    first = weights[0].meta
    h = block_tensor(x, TensorMeta(0, x.shape, (rows, first.block_shape[0])))
    for w, b, act in zip(weights, biases, activations):
        z = blocked_matmul(h, w)
        bias = np.broadcast_to(np.asarray(b, dtype=z.meta.dtype), z.meta.dims)
        z = blocked_add(z, block_tensor(bias, z.meta))
        h = apply_transform(z, act)
    return h.to_dense()


def accuracy(outputs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(outputs, axis=1) == labels))


class ModelOracle:
    """Accuracy of one model on a fixed validation set, weights taken from a block mapping."""

    def __init__(self, tensor_ids: Sequence[int], biases, x, y, activations):
        self.tensor_ids = list(tensor_ids)
        self.biases = biases
        self.x, self.y = x, y
        self.activations = list(activations)
        self.calls = 0

    def __call__(self, mapping) -> float:
        self.calls += 1
        weights = [mapping.tensor(t) for t in self.tensor_ids]
        return accuracy(blocked_forward(weights, self.biases, self.x, self.activations), self.y)


def model_tensors(spec: ModelFamilySpec, m: int, model: Model) -> list[BlockedTensor]:
    return [block_tensor(w, spec.weight_meta(m, j)) for j, w in enumerate(model.weights)]


def save_model(path, model: Model) -> None:
    arrays = {f"w{i}": w for i, w in enumerate(model.weights)}
    arrays.update({f"b{i}": b for i, b in enumerate(model.biases)})
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path, num_layers: int) -> Model:
    with np.load(path) as data:
        return Model(
            [data[f"w{i}"] for i in range(num_layers)],
            [data[f"b{i}"] for i in range(num_layers)],
        )


def count_differing_blocks(a: np.ndarray, b: np.ndarray, block_shape) -> int:
    meta = TensorMeta(0, a.shape, block_shape)
    ba, bb = block_tensor(a, meta), block_tensor(b, meta)
    return sum(not np.array_equal(ba.blocks[k], bb.blocks[k]) for k in ba.blocks)

