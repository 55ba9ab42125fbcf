"""Page store: immutable page files plus a manifest that is the commit point.

Layout under the store root::

    manifest            catalog of tensors and shared-page refcounts
    pages/<id>.pg       one packed bin: header, block directory, payloads

Page file (little-endian)::

    "DPGE" | page_id u64 | num_blocks u16 | d u16 | block_shape d x u32 | element_kind u8
    directory, per block:
        distinct_block_id u64 | mode u8 | m u32 |
        mode 0 (uniform):    m x tensor_id u32, then block_index d x u32
        mode 1 (per-tensor): m x (tensor_id u32, block_index d x u32)
    payloads: num_blocks x prod(block_shape) elements

Manifest (little-endian)::

    "DMAN" | version u16 | capacity u16 | next_page_id u64 | tensors u32
    per tensor: tensor_id u32 | d u16 | element_kind u8 | dims d x u32 |
                block_shape d x u32 | n_private u32 | n_private x u64 |
                n_shared u32 | n_shared x u64
    shared records u32, then per record: page_id u64 | refcount u32

A page referenced by one tensor lives in that tensor's private set; a page
referenced by two or more lives in the shared set with a refcount.
Operations write any new page files first, then atomically replace the
manifest, then delete page files the new manifest no longer names.
"""

from __future__ import annotations

import io
import logging
import math
import os
import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np

from .errors import FormatError, ShapeError, StoreError
from .packing import Ownership, PackingScheme, pack_two_stage, validate_scheme
from .tensor import BlockKey, TensorMeta, assemble_tensor

log = logging.getLogger(__name__)

PAGE_MAGIC = b"DPGE"
MANIFEST_MAGIC = b"DMAN"
MANIFEST_VERSION = 1
KIND_CODES = {"float64": 0, "float32": 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
UNIFORM, PER_TENSOR = 0, 1


@dataclass
class DirectoryEntry:
    distinct_id: int
    positions: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)

    @property
    def mode(self) -> int:
        tids = [t for t, _ in self.positions]
        if self.positions and len(set(tids)) == len(tids) and len({i for _, i in self.positions}) == 1:
            return UNIFORM
        return PER_TENSOR

    def encode(self, d: int) -> bytes:
        mode = self.mode
        out = [struct.pack("<QBI", self.distinct_id, mode, len(self.positions))]
        if mode == UNIFORM:
            out.append(struct.pack(f"<{len(self.positions)}I", *(t for t, _ in self.positions)))
            out.append(struct.pack(f"<{d}I", *self.positions[0][1]))
        else:
            for t, idx in self.positions:
                out.append(struct.pack(f"<I{d}I", t, *idx))
        return b"".join(out)


@dataclass
class Page:
    page_id: int
    block_shape: tuple[int, ...]
    element_kind: str
    entries: list[DirectoryEntry]
    blocks: list[np.ndarray]

    def content_key(self):
        """Everything except the page id; equal keys mean interchangeable pages."""
        return (
            self.block_shape,
            self.element_kind,
            tuple((e.distinct_id, tuple(e.positions)) for e in self.entries),
            b"".join(np.ascontiguousarray(b, dtype=self.element_kind).tobytes() for b in self.blocks),
        )

    def to_bytes(self) -> bytes:
        d = len(self.block_shape)
        buf = io.BytesIO()
        buf.write(struct.pack("<4sQHH", PAGE_MAGIC, self.page_id, len(self.entries), d))
        buf.write(struct.pack(f"<{d}IB", *self.block_shape, KIND_CODES[self.element_kind]))
        for e in self.entries:
            buf.write(e.encode(d))
        dtype = np.dtype(self.element_kind).newbyteorder("<")
        for b in self.blocks:
            buf.write(np.ascontiguousarray(b, dtype=dtype).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, page_id: Optional[int] = None) -> Page:
        off = 0

        def take(fmt):
            nonlocal off
            size = struct.calcsize(fmt)
            if off + size > len(data):
                raise FormatError("page is truncated")
            vals = struct.unpack_from(fmt, data, off)
            off += size
            return vals

        magic, pid, n, d = take("<4sQHH")
        if magic != PAGE_MAGIC:
            raise FormatError(f"bad page magic {magic!r}")
        if page_id is not None and pid != page_id:
            raise FormatError(f"page header names id {pid}, expected {page_id}")
        *shape, kind = take(f"<{d}IB")
        if kind not in KIND_NAMES:
            raise FormatError(f"unknown element kind code {kind}")
        entries = []
        for _ in range(n):
            did, mode, m = take("<QBI")
            entry = DirectoryEntry(did)
            if mode == UNIFORM:
                tids = take(f"<{m}I")
                idx = take(f"<{d}I")
                entry.positions = [(t, idx) for t in tids]
            elif mode == PER_TENSOR:
                for _ in range(m):
                    t, *idx = take(f"<I{d}I")
                    entry.positions.append((t, tuple(idx)))
            else:
                raise FormatError(f"unknown directory mode {mode}")
            entries.append(entry)
        dtype = np.dtype(KIND_NAMES[kind]).newbyteorder("<")
        count = math.prod(shape)
        if off + n * count * dtype.itemsize != len(data):
            raise FormatError("page payload size does not match its header")
        blocks = []
        for _ in range(n):
            arr = np.frombuffer(data, dtype, count, off).astype(KIND_NAMES[kind]).reshape(shape)
            blocks.append(arr)
            off += count * dtype.itemsize
        return cls(pid, tuple(shape), KIND_NAMES[kind], entries, blocks)


def directory_metadata_bytes(entry: DirectoryEntry, d: int) -> int:
    return len(entry.encode(d))


@dataclass
class CatalogEntry:
    meta: TensorMeta
    private_pages: list[int] = field(default_factory=list)
    shared_refs: list[int] = field(default_factory=list)

    @property
    def pages(self) -> list[int]:
        return self.private_pages + self.shared_refs


@dataclass
class StoredTensor:
    """A tensor as the store sees it: its meta and block position -> distinct id."""

    meta: TensorMeta
    mapping: dict[tuple[int, ...], int]

    def items(self) -> list[int]:
        return [self.mapping[idx] for idx in self.meta.block_indices()]


@dataclass
class _State:
    capacity: int
    next_page_id: int = 0
    catalog: dict[int, CatalogEntry] = field(default_factory=dict)
    shared: dict[int, int] = field(default_factory=dict)

    def copy(self) -> _State:
        return _State(
            self.capacity,
            self.next_page_id,
            {
                t: CatalogEntry(e.meta, list(e.private_pages), list(e.shared_refs))
                for t, e in self.catalog.items()
            },
            dict(self.shared),
        )

    def referenced(self) -> set[int]:
        return {p for e in self.catalog.values() for p in e.pages}

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(
            struct.pack(
                "<4sHHQI", MANIFEST_MAGIC, MANIFEST_VERSION, self.capacity,
                self.next_page_id, len(self.catalog),
            )
        )
        for tid in sorted(self.catalog):
            e = self.catalog[tid]
            m = e.meta
            d = m.ndim
            buf.write(struct.pack("<IHB", tid, d, KIND_CODES[m.element_kind]))
            buf.write(struct.pack(f"<{d}I{d}I", *m.dims, *m.block_shape))
            buf.write(struct.pack(f"<I{len(e.private_pages)}Q", len(e.private_pages), *e.private_pages))
            buf.write(struct.pack(f"<I{len(e.shared_refs)}Q", len(e.shared_refs), *e.shared_refs))
        buf.write(struct.pack("<I", len(self.shared)))
        for pid in sorted(self.shared):
            buf.write(struct.pack("<QI", pid, self.shared[pid]))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> _State:
        off = 0

        def take(fmt):
            nonlocal off
            size = struct.calcsize(fmt)
            if off + size > len(data):
                raise FormatError("manifest is truncated")
            vals = struct.unpack_from(fmt, data, off)
            off += size
            return vals

        magic, version, capacity, next_id, count = take("<4sHHQI")
        if magic != MANIFEST_MAGIC:
            raise FormatError(f"bad manifest magic {magic!r}")
        if version != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {version}")
        state = cls(capacity, next_id)
        for _ in range(count):
            tid, d, kind = take("<IHB")
            vals = take(f"<{d}I{d}I")
            meta = TensorMeta(tid, vals[:d], vals[d:], KIND_NAMES[kind])
            (n,) = take("<I")
            private = list(take(f"<{n}Q"))
            (n,) = take("<I")
            shared = list(take(f"<{n}Q"))
            state.catalog[tid] = CatalogEntry(meta, private, shared)
        (n,) = take("<I")
        for _ in range(n):
            pid, rc = take("<QI")
            state.shared[pid] = rc
        if off != len(data):
            raise FormatError("trailing bytes in manifest")
        return state


class PageStore:
    """A directory of immutable pages organised into private and shared sets."""

    def __init__(self, root, capacity: int = 8):
        self.root = Path(root)
        manifest = self.root / "manifest"
        if manifest.exists():
            self._state = _State.from_bytes(manifest.read_bytes())
        else:
            if capacity < 1:
                raise ValueError("capacity must be >= 1")
            self._state = _State(capacity)
        self._layouts: dict[int, StoredTensor] = {}

    @classmethod
    def open(cls, root, recover: bool = True) -> PageStore:
        root = Path(root)
        if not (root / "manifest").exists():
            raise StoreError(f"no page store at {root} (run materialize first)")
        store = cls(root)
        if recover:
            store.remove_orphans()
        return store

    # -- read side ----------------------------------------------------------

    @property
    def capacity(self) -> int:
        return self._state.capacity

    @property
    def catalog(self) -> dict[int, CatalogEntry]:
        return self._state.catalog

    @property
    def shared(self) -> dict[int, int]:
        return self._state.shared

    def page_ids(self) -> list[int]:
        return sorted(self._state.referenced())

    def private_page_ids(self) -> list[int]:
        return sorted(p for e in self.catalog.values() for p in e.private_pages)

    @property
    def num_pages(self) -> int:
        return len(self._state.referenced())

    def page_path(self, page_id: int) -> Path:
        return self.root / "pages" / f"{page_id}.pg"

    def read_page(self, page_id: int) -> Page:
        try:
            data = self.page_path(page_id).read_bytes()
        except FileNotFoundError:
            raise StoreError(f"page {page_id} is missing", page_id) from None
        try:
            return Page.from_bytes(data, page_id)
        except FormatError as exc:
            raise StoreError(f"page {page_id} is corrupt: {exc}", page_id) from exc

    def _entry(self, tensor_id: int) -> CatalogEntry:
        try:
            return self.catalog[tensor_id]
        except KeyError:
            raise StoreError(f"tensor {tensor_id} is not in the store") from None

    def load_tensor(self, tensor_id: int) -> Iterator[tuple[BlockKey, np.ndarray]]:
        """Yield every block of a tensor once, resolved through the page directories."""
        entry = self._entry(tensor_id)
        for pid in entry.pages:
            page = self.read_page(pid)
            for dir_entry, block in zip(page.entries, page.blocks):
                for t, idx in dir_entry.positions:
                    if t == tensor_id:
                        yield BlockKey(t, idx), block

    def read_tensor(self, tensor_id: int) -> np.ndarray:
        meta = self._entry(tensor_id).meta
        return assemble_tensor(self.load_tensor(tensor_id), meta)

    def layout(self, tensor_id: int) -> StoredTensor:
        """Block position -> distinct id for a stored tensor."""
        if tensor_id not in self._layouts:
            entry = self._entry(tensor_id)
            mapping = {}
            for pid in entry.pages:
                for e in self.read_page(pid).entries:
                    for t, idx in e.positions:
                        if t == tensor_id:
                            mapping[idx] = e.distinct_id
            self._layouts[tensor_id] = StoredTensor(entry.meta, mapping)
        return self._layouts[tensor_id]

    def page_owners(self) -> dict[int, list[int]]:
        owners = defaultdict(list)
        for tid in sorted(self.catalog):
            for pid in self.catalog[tid].pages:
                owners[pid].append(tid)
        return dict(owners)

    # -- write side ---------------------------------------------------------

    def materialize(
        self,
        scheme: PackingScheme,
        blocks: Mapping[int, np.ndarray],
        tensors: Mapping[int, StoredTensor],
    ) -> None:
        """Replace the store's contents with one page per bin of ``scheme``.

        The store adopts the scheme's capacity.
        """
        own = Ownership({t: st.items() for t, st in tensors.items()})
        report = validate_scheme(scheme, own)
        if not report:
            raise ShapeError("scheme is invalid: " + "; ".join(report.violations))
        state = _State(scheme.capacity, self._state.next_page_id)
        old_pages = self._state.referenced()
        self._place(state, scheme, blocks, tensors, reuse=old_pages)

    def remove_tensor(self, tensor_id: int) -> None:
        self._entry(tensor_id)
        state = self._state.copy()
        freed = self._drop(state, tensor_id)
        self._commit(state, writes=[], deletes=freed)

    def insert_tensor(
        self, meta: TensorMeta, mapping: Mapping, blocks: Mapping[int, np.ndarray]
    ) -> None:
        """Add a tensor and repack it together with every tensor it shares blocks with."""
        if meta.tensor_id in self.catalog:
            raise StoreError(f"tensor {meta.tensor_id} is already stored")
        self._insert(self._state.copy(), StoredTensor(meta, dict(mapping)), blocks, freed=set())

    def update_tensor(
        self, meta: TensorMeta, mapping: Mapping, blocks: Mapping[int, np.ndarray]
    ) -> None:
        """Removal of the old tensor followed by insertion of the new one, committed once."""
        self._entry(meta.tensor_id)
        old = self.layout(meta.tensor_id)
        known = {did: blk for did, blk in self._blocks_of([meta.tensor_id]).items()}
        known.update(blocks)
        state = self._state.copy()
        freed = self._drop(state, meta.tensor_id)
        self._layouts.pop(meta.tensor_id, None)
        try:
            self._insert(state, StoredTensor(meta, dict(mapping)), known, freed)
        except Exception:
            self._layouts[meta.tensor_id] = old
            raise

    # -- internals ----------------------------------------------------------

    def _drop(self, state: _State, tensor_id: int) -> set[int]:
        """Remove a tensor from ``state``; return page ids no longer referenced."""
        entry = state.catalog.pop(tensor_id)
        freed = set(entry.private_pages)
        for pid in entry.shared_refs:
            state.shared[pid] -= 1
            if state.shared[pid] == 1:
                del state.shared[pid]
                owner = next(t for t, e in state.catalog.items() if pid in e.shared_refs)
                state.catalog[owner].shared_refs.remove(pid)
                state.catalog[owner].private_pages.append(pid)
        self._layouts.pop(tensor_id, None)
        return freed

    def _blocks_of(self, tensor_ids) -> dict[int, np.ndarray]:
        found = {}
        pages = {p for t in tensor_ids for p in self.catalog[t].pages}
        for pid in sorted(pages):
            page = self.read_page(pid)
            for e, blk in zip(page.entries, page.blocks):
                found.setdefault(e.distinct_id, blk)
        return found

    def _insert(self, state: _State, new: StoredTensor, blocks, freed: set[int]) -> None:
        tid = new.meta.tensor_id
        missing = [idx for idx in new.meta.block_indices() if idx not in new.mapping]
        if missing:
            raise ShapeError(f"tensor {tid} mapping is missing block {missing[0]}")
        layouts = {t: self.layout(t) for t in state.catalog}
        layouts[tid] = new

        # the repack unit is every tensor reachable through shared blocks
        holders = defaultdict(set)
        for t, st in layouts.items():
            for did in st.mapping.values():
                holders[did].add(t)
        component, queue = {tid}, deque([tid])
        while queue:
            t = queue.popleft()
            for did in set(layouts[t].mapping.values()):
                for u in holders[did] - component:
                    component.add(u)
                    queue.append(u)

        group = {t: layouts[t] for t in sorted(component)}
        own = Ownership({t: st.items() for t, st in group.items()})
        scheme = pack_two_stage(own, state.capacity)

        old_pages = {p for t in component if t != tid for p in state.catalog[t].pages}
        data = self._blocks_of([t for t in component if t != tid])
        data.update(blocks)
        for t in component:
            state.catalog.pop(t, None)
        for pid in old_pages:
            state.shared.pop(pid, None)
        log.debug("repacking tensors %s into %d pages", sorted(component), scheme.num_bins)
        self._place(state, scheme, data, group, reuse=old_pages | freed, keep=True)

    def _build_pages(self, scheme, blocks, tensors) -> list[tuple[int, Page]]:
        """Directory entries and payloads for each covered bin, in bin order."""
        d = None
        positions = defaultdict(lambda: defaultdict(list))
        for t in sorted(tensors):
            st = tensors[t]
            if d is None:
                d, shape = st.meta.ndim, st.meta.block_shape
            elif st.meta.block_shape != shape:
                raise ShapeError("all tensors in a scheme must share one block shape")
            taken = set()
            for b in scheme.cover.get(t, ()):
                for item in scheme.bins[b]:
                    if item not in taken:
                        taken.add(item)
                        positions[b][item].extend((t, idx) for idx in st.meta.block_indices()
                                                  if st.mapping[idx] == item)
        owners = scheme.bin_owners()
        pages = []
        for b, items in enumerate(scheme.bins):
            if not owners[b]:
                continue
            kinds = {tensors[t].meta.element_kind for t in owners[b]}
            if len(kinds) != 1:
                raise ShapeError(f"bin {b} mixes element kinds {sorted(kinds)}")
            kind = kinds.pop()
            entries, payload = [], []
            for item in items:
                entries.append(DirectoryEntry(item, sorted(positions[b][item])))
                try:
                    blk = blocks[item]
                except KeyError:
                    raise StoreError(f"no data for distinct block {item}") from None
                payload.append(np.asarray(blk, dtype=kind).reshape(shape))
            pages.append((b, Page(-1, shape, kind, entries, payload)))
        return pages

    def _place(self, state, scheme, blocks, tensors, reuse=(), keep=False) -> None:
        """Turn ``scheme`` into pages in ``state``, reusing identical existing pages."""
        built = self._build_pages(scheme, blocks, tensors)
        pool = defaultdict(list)
        for pid in sorted(reuse):
            if self.page_path(pid).exists():
                pool[self.read_page(pid).content_key()].append(pid)
        writes, bin_page = [], {}
        for b, page in built:
            match = pool.get(page.content_key())
            if match:
                page.page_id = match.pop(0)
            else:
                page.page_id = state.next_page_id
                state.next_page_id += 1
                writes.append(page)
            bin_page[b] = page.page_id

        refs = defaultdict(int)
        for t in tensors:
            for b in scheme.cover.get(t, ()):
                refs[bin_page[b]] += 1
        for t in sorted(tensors):
            entry = CatalogEntry(tensors[t].meta)
            for b in scheme.cover.get(t, ()):
                pid = bin_page[b]
                (entry.shared_refs if refs[pid] > 1 else entry.private_pages).append(pid)
            state.catalog[t] = entry
        for pid, rc in refs.items():
            if rc > 1:
                state.shared[pid] = rc
        live = state.referenced()
        deletes = {p for p in set(reuse) | self._state.referenced() if p not in live}
        self._commit(state, writes, deletes)
        for t in tensors:
            self._layouts[t] = tensors[t]

    def _commit(self, state: _State, writes, deletes) -> None:
        pages_dir = self.root / "pages"
        pages_dir.mkdir(parents=True, exist_ok=True)
        for page in writes:
            _atomic_write(self.page_path(page.page_id), page.to_bytes())
        _atomic_write(self.root / "manifest", state.to_bytes())
        self._state = state
        for pid in deletes:
            try:
                self.page_path(pid).unlink()
            except FileNotFoundError:
                pass

    def remove_orphans(self) -> list[int]:
        """Delete page files the manifest does not reference (left by an interrupted write)."""
        live = self._state.referenced()
        removed = []
        pages_dir = self.root / "pages"
        if pages_dir.exists():
            for path in pages_dir.iterdir():
                if path.suffix == ".tmp":
                    path.unlink()
                    continue
                if path.suffix == ".pg" and path.stem.isdigit() and int(path.stem) not in live:
                    path.unlink()
                    removed.append(int(path.stem))
        return sorted(removed)

    def audit(self) -> list[str]:
        """Check refcounts, orphans and per-tensor coverage. Empty list means healthy."""
        problems = []
        state = self._state
        holders = defaultdict(list)
        for tid, e in state.catalog.items():
            for pid in e.private_pages:
                holders[pid].append(("private", tid))
            for pid in e.shared_refs:
                holders[pid].append(("shared", tid))
        for pid, hs in holders.items():
            kinds = {k for k, _ in hs}
            if kinds == {"private"} and len(hs) != 1:
                problems.append(f"page {pid} is private to {len(hs)} tensors")
            if "shared" in kinds:
                if "private" in kinds:
                    problems.append(f"page {pid} is both private and shared")
                if state.shared.get(pid) != len(hs):
                    problems.append(f"page {pid} refcount {state.shared.get(pid)} != {len(hs)} refs")
        for pid, rc in state.shared.items():
            if rc < 2:
                problems.append(f"shared page {pid} has refcount {rc}")
            if pid not in holders:
                problems.append(f"shared page {pid} is not referenced")
        if sum(state.shared.values()) != sum(len(e.shared_refs) for e in state.catalog.values()):
            problems.append("refcount conservation violated")
        pages_dir = self.root / "pages"
        on_disk = set()
        if pages_dir.exists():
            on_disk = {int(p.stem) for p in pages_dir.glob("*.pg") if p.stem.isdigit()}
        for pid in sorted(on_disk - set(holders)):
            problems.append(f"orphan page file {pid}")
        for pid in sorted(set(holders) - on_disk):
            problems.append(f"page {pid} is referenced but missing")
        for tid, e in state.catalog.items():
            try:
                assemble_tensor(self.load_tensor(tid), e.meta)
            except (ShapeError, StoreError) as exc:
                problems.append(f"tensor {tid}: {exc}")
        return problems


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
