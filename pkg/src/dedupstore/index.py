"""L2-LSH index over tensor blocks and magnitude-ordered model deduplication.

Blocks whose signatures collide on all K hashes fall into one cluster. The
first block indexed into a cluster is its representative and is the only one
physically kept; later members are mapped onto it while the model's accuracy
guard allows.

Index file layout (little-endian)::

    magic "DDIX" | version u16 | K u32 | w f64 | seed i64
    L:        count u64, then per block: length u64, length x f64
    clusters: count u64, then per cluster:
              signature K x i64 | representative u64 | member count u32 |
              members: (tensor_id u32, d u32, d x u32) ...
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .errors import FormatError, OracleError, ShapeError, UnknownBlockError
from .tensor import BlockedTensor, BlockKey, TensorMeta, magnitude_score

log = logging.getLogger(__name__)

MAGIC = b"DDIX"
VERSION = 1

Signature = tuple[int, ...]


@dataclass(frozen=True)
class LshConfig:
    """Euclidean LSH family h_j(v) = floor((a_j . v + b_j) / w), K hashes concatenated.

    Projections depend only on (seed, block length), so a config can hash
    blocks of any length and reproduces identical signatures after reload.
    """

    bucket_width: float
    num_hashes: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_hashes < 1:
            raise ValueError("num_hashes must be >= 1")
        if not self.bucket_width > 0:
            raise ValueError("bucket_width must be > 0")

    @cached_property
    def _projection_cache(self) -> dict:
        return {}

    def projections(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        cache = self._projection_cache
        if dim not in cache:
            rng = np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, dim])
            a = rng.standard_normal((self.num_hashes, dim))
            b = rng.uniform(0.0, 1.0, self.num_hashes) * self.bucket_width
            cache[dim] = (a, b)
        return cache[dim]

    def signature(self, block) -> Signature:
        v = np.asarray(block, dtype=np.float64).ravel()
        a, b = self.projections(v.size)
        return tuple(int(h) for h in np.floor((a @ v + b) / self.bucket_width))


def lsh_signature(block, config: LshConfig, dim: Optional[int] = None) -> Signature:
    """Signature of one block; ``dim`` pins the expected block length."""
    size = np.asarray(block).size
    if dim is not None and size != dim:
        raise ShapeError(f"block has {size} elements, index expects {dim}")
    return config.signature(block)


def auto_bucket_width(blocks: Sequence, sample: int = 100, divisor: float = 8.0, seed: int = 0) -> float:
    """Median pairwise L2 distance of up to ``sample`` blocks, divided by ``divisor``.

    With K=4 a divisor of 8 keeps the chance that two independent blocks at
    the median distance collide near 6e-6, while blocks closer than ~1% of
    that distance still collide almost surely.
    """
    vecs = np.array([np.asarray(b, dtype=np.float64).ravel() for b in blocks])
    if len(vecs) > sample:
        rng = np.random.default_rng(seed)
        vecs = vecs[np.sort(rng.choice(len(vecs), sample, replace=False))]
    if len(vecs) < 2:
        return 1.0
    d = pdist(vecs)
    d = d[d > 0]
    if d.size == 0:
        return 1.0
    return float(np.median(d)) / divisor


@dataclass
class Cluster:
    representative: int
    members: list[BlockKey] = field(default_factory=list)


AccuracyOracle = Callable[["BlockMapping"], float]


class BlockMapping:
    """Per-tensor maps from logical block position to distinct-block id.

    While a model is being indexed some blocks are still unassigned; those
    resolve to their original values so an oracle always sees a whole model.
    """

    def __init__(self, distinct: list, metas: Mapping[int, TensorMeta], pending=None):
        self.distinct = distinct
        self.metas = dict(metas)
        self.assignments: dict[BlockKey, int] = {}
        self.pending: dict[BlockKey, np.ndarray] = dict(pending or {})

    @property
    def is_total(self) -> bool:
        return not self.pending

    def assign(self, key: BlockKey, distinct_id: int):
        self.pending.pop(key, None)
        self.assignments[key] = distinct_id

    def f(self, tensor_id: int) -> dict[tuple[int, ...], int]:
        return {k.block_index: d for k, d in sorted(self.assignments.items()) if k.tensor_id == tensor_id}

    def block(self, key: BlockKey) -> np.ndarray:
        meta = self.metas[key.tensor_id]
        if key in self.assignments:
            raw = self.distinct[self.assignments[key]]
        else:
            raw = self.pending[key]
        return np.asarray(raw).reshape(meta.block_shape).astype(meta.dtype, copy=False)

    def tensor(self, tensor_id: int) -> BlockedTensor:
        meta = self.metas[tensor_id]
        return BlockedTensor(
            meta, {idx: self.block(BlockKey(tensor_id, idx)) for idx in meta.block_indices()}
        )

    def dense(self, tensor_id: int) -> np.ndarray:
        return self.tensor(tensor_id).to_dense()


@dataclass
class IndexReport:
    """What happened while one model was indexed."""

    baseline_accuracy: float
    accuracies: list[float] = field(default_factory=list)
    trace: list[tuple[BlockKey, float, str]] = field(default_factory=list)
    deduplicated: int = 0
    merged: int = 0
    stopped: bool = False

    @property
    def final_accuracy(self) -> float:
        return self.accuracies[-1] if self.accuracies else self.baseline_accuracy


class DedupIndex:
    def __init__(self, config: LshConfig, magnitude_mode: str = "quartile"):
        self.config = config
        self.magnitude_mode = magnitude_mode
        self.clusters: dict[Signature, Cluster] = {}
        self.distinct: list[np.ndarray] = []
        self._where: dict[BlockKey, Signature] = {}
        self.last_report: Optional[IndexReport] = None

    def __len__(self):
        return len(self.clusters)

    def __contains__(self, key):
        return BlockKey(key[0], tuple(key[1])) in self._where

    @property
    def block_size(self) -> Optional[int]:
        return self.distinct[0].size if self.distinct else None

    def signature(self, block) -> Signature:
        return lsh_signature(block, self.config, self.block_size)

    def lookup(self, sig: Signature) -> Optional[Cluster]:
        return self.clusters.get(tuple(sig))

    def cluster_of(self, key) -> Optional[Cluster]:
        sig = self._where.get(BlockKey(key[0], tuple(key[1])))
        return None if sig is None else self.clusters[sig]

    # -- single block maintenance ------------------------------------------

    def _insert(self, key: BlockKey, block, dedup: bool, journal=None) -> int:
        if key in self._where:
            raise ValueError(f"block {key} is already indexed")
        block = np.asarray(block)
        sig = self.signature(block)
        cluster = self.clusters.get(sig)
        created = appended = False
        if cluster is None:
            did = len(self.distinct)
            self.distinct.append(block.ravel().copy())
            self.clusters[sig] = Cluster(did, [key])
            created = appended = True
        else:
            cluster.members.append(key)
            if dedup:
                did = cluster.representative
            else:
                did = len(self.distinct)
                self.distinct.append(block.ravel().copy())
                appended = True
        self._where[key] = sig
        if journal is not None:
            journal.append((key, sig, created, appended))
        return did

    def _undo(self, journal, upto: int = 0):
        while len(journal) > upto:
            key, sig, created, appended = journal.pop()
            del self._where[key]
            if created:
                del self.clusters[sig]
            else:
                self.clusters[sig].members.pop()
            if appended:
                self.distinct.pop()

    def insert_block(self, key, block) -> int:
        """Index one block, mapping it onto a colliding representative if any."""
        return self._insert(BlockKey(key[0], tuple(key[1])), block, dedup=True)

    def remove_block(self, key) -> None:
        key = BlockKey(key[0], tuple(key[1]))
        try:
            sig = self._where.pop(key)
        except KeyError:
            raise UnknownBlockError(f"block {key} is not indexed") from None
        cluster = self.clusters[sig]
        cluster.members.remove(key)
        # the representative stays even when its own key leaves the group
        if not cluster.members:
            del self.clusters[sig]

    def update_block(self, key, block) -> int:
        key = BlockKey(key[0], tuple(key[1]))
        if key not in self._where:
            raise UnknownBlockError(f"block {key} is not indexed")
        self.remove_block(key)
        return self.insert_block(key, block)

    # -- whole-model indexing ----------------------------------------------

    def index_model(
        self,
        tensors: Sequence[BlockedTensor],
        oracle: AccuracyOracle,
        batch: int = 5,
        threshold: float = 0.035,
        strict_rollback: bool = False,
    ) -> BlockMapping:
        """Deduplicate one model's blocks in ascending magnitude order.

        Accuracy is checked after every ``batch`` blocks. Once it has dropped
        by more than ``threshold`` below the model's undeduplicated accuracy,
        every remaining block is indexed but kept as its own distinct block.
        The failing batch is kept unless ``strict_rollback`` is set.
        """
        if batch < 1:
            raise ValueError("batch must be >= 1")
        metas = {t.meta.tensor_id: t.meta for t in tensors}
        if len(metas) != len(tensors):
            raise ValueError("tensor ids within a model must be unique")
        sizes = {m.block_size for m in metas.values()}
        if self.block_size is not None:
            sizes.add(self.block_size)
        if len(sizes) > 1:
            raise ShapeError(f"all tensors must share the index block size, got {sorted(sizes)}")

        entries = []
        for t in tensors:
            for key, blk in t.items():
                entries.append((magnitude_score(blk, self.magnitude_mode), key, blk))
        entries.sort(key=lambda e: (e[0], e[1].tensor_id, e[1].block_index))

        mapping = BlockMapping(self.distinct, metas, {key: blk for _, key, blk in entries})
        journal: list = []

        def evaluate() -> float:
            try:
                return float(oracle(mapping))
            except Exception as exc:
                self._undo(journal)
                raise OracleError(f"accuracy oracle failed: {exc}") from exc

        report = IndexReport(evaluate())
        pos = 0
        n = len(entries)
        while pos < n:
            mark = len(journal)
            chunk = entries[pos : pos + batch]
            for score, key, blk in chunk:
                did = self._insert(key, blk, dedup=True, journal=journal)
                mapping.assign(key, did)
                report.trace.append((key, score, "dedup"))
            pos += len(chunk)
            acc = evaluate()
            report.accuracies.append(acc)
            if report.baseline_accuracy - acc > threshold:
                if strict_rollback:
                    self._undo(journal, mark)
                    for _, key, blk in chunk:
                        mapping.assignments.pop(key)
                        mapping.pending[key] = blk
                    del report.trace[-len(chunk) :]
                    pos -= len(chunk)
                for score, key, blk in entries[pos:]:
                    mapping.assign(key, self._insert(key, blk, dedup=False, journal=journal))
                    report.trace.append((key, score, "self"))
                report.stopped = True
                if strict_rollback:
                    report.accuracies.append(evaluate())
                break

        report.deduplicated = sum(1 for *_, mode in report.trace if mode == "dedup")
        report.merged = sum(
            1
            for key, _, mode in report.trace
            if mode == "dedup" and self.clusters[self._where[key]].members[0] != key
        )
        self.last_report = report
        log.debug(
            "indexed %d blocks: %d deduplicated, %d merged, stopped=%s",
            n, report.deduplicated, report.merged, report.stopped,
        )
        return mapping

    # -- persistence --------------------------------------------------------

    def to_bytes(self) -> bytes:
        cfg = self.config
        buf = io.BytesIO()
        buf.write(struct.pack("<4sHIdq", MAGIC, VERSION, cfg.num_hashes, cfg.bucket_width, cfg.seed))
        buf.write(struct.pack("<Q", len(self.distinct)))
        for blk in self.distinct:
            arr = np.asarray(blk, dtype="<f8").ravel()
            buf.write(struct.pack("<Q", arr.size))
            buf.write(arr.tobytes())
        buf.write(struct.pack("<Q", len(self.clusters)))
        k = cfg.num_hashes
        for sig, cluster in self.clusters.items():
            buf.write(struct.pack(f"<{k}q", *sig))
            buf.write(struct.pack("<QI", cluster.representative, len(cluster.members)))
            for key in cluster.members:
                d = len(key.block_index)
                buf.write(struct.pack(f"<II{d}I", key.tensor_id, d, *key.block_index))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, magnitude_mode: str = "quartile") -> DedupIndex:
        view = memoryview(data)
        off = 0

        def take(fmt):
            nonlocal off
            size = struct.calcsize(fmt)
            if off + size > len(view):
                raise FormatError("index file is truncated")
            vals = struct.unpack_from(fmt, view, off)
            off += size
            return vals

        magic, version, k, w, seed = take("<4sHIdq")
        if magic != MAGIC:
            raise FormatError(f"bad index magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported index version {version}")
        idx = cls(LshConfig(w, k, seed), magnitude_mode)
        (count,) = take("<Q")
        for _ in range(count):
            (length,) = take("<Q")
            if off + 8 * length > len(view):
                raise FormatError("index file is truncated")
            idx.distinct.append(np.frombuffer(view, "<f8", length, off).astype(np.float64))
            off += 8 * length
        (count,) = take("<Q")
        for _ in range(count):
            sig = take(f"<{k}q")
            rep, members = take("<QI")
            if rep >= len(idx.distinct):
                raise FormatError(f"representative {rep} out of range")
            cluster = Cluster(rep)
            for _ in range(members):
                tid, d = take("<II")
                key = BlockKey(tid, take(f"<{d}I"))
                cluster.members.append(key)
                idx._where[key] = sig
            idx.clusters[sig] = cluster
        if off != len(view):
            raise FormatError("trailing bytes after index data")
        return idx

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path, magnitude_mode: str = "quartile") -> DedupIndex:
        return cls.from_bytes(Path(path).read_bytes(), magnitude_mode)
