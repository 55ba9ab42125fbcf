"""Packing distinct blocks (items) into capacity-bounded pages (bins).

Every tensor must be exactly the union of some subset of bins, and the goal
is to use as few bins as possible. Items may be replicated across bins.

Scheme interchange format::

    DPSCHEME v1 l=<capacity>
    BIN <idx>: <item ids>
    COVER <tensor id>: <bin indices>
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .errors import FormatError


class Ownership:
    """Which items each tensor holds, remembering each tensor's write order.

    Repeated items inside one tensor's order collapse to their first
    occurrence.
    """

    def __init__(self, tensors: Mapping[int, Iterable[int]]):
        self.order: dict[int, list[int]] = {}
        for tid in sorted(tensors):
            seq = list(dict.fromkeys(int(i) for i in tensors[tid]))
            if not seq:
                raise ValueError(f"tensor {tid} owns no items")
            self.order[int(tid)] = seq
        self.sets = {tid: frozenset(seq) for tid, seq in self.order.items()}
        owners = defaultdict(set)
        for tid, items in self.sets.items():
            for item in items:
                owners[item].add(tid)
        self.owners = {item: frozenset(ts) for item, ts in sorted(owners.items())}

    @property
    def tensors(self) -> list[int]:
        return list(self.order)

    @property
    def items(self) -> list[int]:
        return list(self.owners)

    def a(self, item: int, tensor: int) -> bool:
        return tensor in self.owners.get(item, ())

    def restrict(self, tensor_ids: Iterable[int]) -> Ownership:
        return Ownership({t: self.order[t] for t in tensor_ids})

    def __repr__(self):
        return f"Ownership({len(self.order)} tensors, {len(self.owners)} items)"


@dataclass(frozen=True)
class EquivalentClass:
    owner_set: frozenset
    items: tuple[int, ...]


@dataclass
class PackingScheme:
    capacity: int
    bins: list[tuple[int, ...]] = field(default_factory=list)
    cover: dict[int, list[int]] = field(default_factory=dict)

    def __len__(self):
        return len(self.bins)

    @property
    def num_bins(self) -> int:
        return len(self.bins)

    def p(self, item: int, bin_index: int) -> bool:
        return item in self.bins[bin_index]

    def bin_owners(self) -> list[set[int]]:
        owners = [set() for _ in self.bins]
        for tid, idxs in self.cover.items():
            for b in idxs:
                owners[b].add(tid)
        return owners

    def dumps(self) -> str:
        lines = [f"DPSCHEME v1 l={self.capacity}"]
        for i, b in enumerate(self.bins):
            lines.append(f"BIN {i}: {' '.join(map(str, b))}".rstrip())
        for tid in sorted(self.cover):
            lines.append(f"COVER {tid}: {' '.join(map(str, self.cover[tid]))}".rstrip())
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> PackingScheme:
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise FormatError("empty scheme file")
        head = lines[0].split()
        if len(head) != 3 or head[:2] != ["DPSCHEME", "v1"] or not head[2].startswith("l="):
            raise FormatError(f"bad scheme header {lines[0]!r}")
        scheme = cls(int(head[2][2:]))
        for n, line in enumerate(lines[1:], start=2):
            tag, _, rest = line.partition(" ")
            label, sep, body = rest.partition(":")
            if not sep or tag not in ("BIN", "COVER"):
                raise FormatError(f"line {n}: cannot parse {line!r}")
            values = tuple(int(v) for v in body.split())
            if tag == "BIN":
                if int(label) != len(scheme.bins):
                    raise FormatError(f"line {n}: bin {label} out of order")
                scheme.bins.append(values)
            else:
                scheme.cover[int(label)] = list(values)
        return scheme


def compute_equivalent_classes(own: Ownership) -> list[EquivalentClass]:
    groups = defaultdict(list)
    for item, owners in own.owners.items():
        groups[owners].append(item)
    ordered = sorted(groups, key=lambda s: (-len(s), sorted(s)))
    return [EquivalentClass(s, tuple(sorted(groups[s]))) for s in ordered]


def _chunks(seq, l):
    return [tuple(seq[i : i + l]) for i in range(0, len(seq), l)]


def _check_capacity(l):
    if l < 1:
        raise ValueError(f"capacity must be >= 1, got {l}")


def pack_classes(classes: Sequence[EquivalentClass], l: int) -> PackingScheme:
    """Greedy-1: each equivalent class fills its own run of bins."""
    _check_capacity(l)
    scheme = PackingScheme(l)
    cover = defaultdict(list)
    for cls in classes:
        for chunk in _chunks(cls.items, l):
            for tid in cls.owner_set:
                cover[tid].append(len(scheme.bins))
            scheme.bins.append(chunk)
    scheme.cover = {tid: cover[tid] for tid in sorted(cover)}
    return scheme


def _owner_sets(sets):
    owners = defaultdict(set)
    for t, s in sets.items():
        for i in s:
            owners[i].add(t)
    return owners


def _form_bins(residue, l, frequency, owners, affinity):
    """Cut an ordered residue into bins of at most l items.

    With ``affinity`` each bin is seeded by the hottest remaining item and
    filled with the items whose owners overlap the bin's owners most, so the
    bin stays reusable by as many tensors as possible.
    """
    residue = sorted(residue, key=lambda i: (-frequency[i], i))
    if not affinity:
        return _chunks(residue, l)
    out = []
    while residue:
        first = residue.pop(0)
        chunk, common = [first], set(owners[first])
        while len(chunk) < l and residue:
            nxt = max(residue, key=lambda i: (len(common & owners[i]), frequency[i], -i))
            residue.remove(nxt)
            chunk.append(nxt)
            common &= owners[nxt]
        out.append(tuple(chunk))
    return out


def pack_approx(
    tensors: Mapping[int, Iterable[int]],
    l: int,
    existing: Sequence[tuple[int, ...]] = (),
    frequency: Optional[Mapping[int, int]] = None,
    largest_first: bool = True,
    affinity: bool = False,
) -> PackingScheme:
    """Greedy-2: largest tensor first, reuse packed bins, pack the rest hottest-first.

    A tensor may reuse any bin whose items it owns; bins are taken greedily
    by how many still-uncovered items they add. ``existing`` bins are offered
    for reuse and come first in the result.
    """
    _check_capacity(l)
    sets = {int(t): frozenset(items) for t, items in tensors.items()}
    owners = _owner_sets(sets)
    if frequency is None:
        frequency = {i: len(ts) for i, ts in owners.items()}
    sign = -1 if largest_first else 1
    order = sorted(sets, key=lambda t: (sign * len(sets[t]), t))

    bins = [tuple(b) for b in existing]
    bin_sets = [frozenset(b) for b in bins]
    cover = {}
    for tid in order:
        remaining = set(sets[tid])
        chosen = []
        while remaining:
            best, gain = None, 0
            for i, bs in enumerate(bin_sets):
                if bs and bs <= sets[tid]:
                    g = len(bs & remaining)
                    if g > gain:
                        best, gain = i, g
            if best is None:
                break
            chosen.append(best)
            remaining -= bin_sets[best]
        for chunk in _form_bins(remaining, l, frequency, owners, affinity):
            chosen.append(len(bins))
            bins.append(chunk)
            bin_sets.append(frozenset(chunk))
        cover[tid] = sorted(chosen)
    return PackingScheme(l, bins, {t: cover[t] for t in sorted(cover)})


# Subset enumeration in the set-cover variant is exponential in tensor count.
SET_COVER_MAX_TENSORS = 10


def pack_set_cover(
    tensors: Mapping[int, Iterable[int]], l: int, existing: Sequence[tuple[int, ...]] = ()
) -> PackingScheme:
    """Greedy weighted set cover over bins cut from intersections of tensor groups.

    Each step adds the bin that covers the most still-uncovered
    (tensor, item) pairs, counting every tensor that owns the whole bin.
    """
    _check_capacity(l)
    sets = {int(t): frozenset(items) for t, items in tensors.items()}
    tids = sorted(sets)
    owners = _owner_sets(sets)
    open_ = {t: set(s) for t, s in sets.items()}
    bins = [tuple(b) for b in existing]
    for b in bins:
        for t in tids:
            if set(b) <= sets[t]:
                open_[t] -= set(b)
    groups = []
    for r in range(1, len(tids) + 1):
        for group in itertools.combinations(tids, r):
            common = frozenset.intersection(*(sets[t] for t in group))
            if common:
                groups.append((group, common))
    while any(open_.values()):
        best, best_key = None, None
        for group, common in groups:
            ranked = sorted(
                common,
                key=lambda i: (-sum(i in open_[t] for t in group), -len(owners[i]), i),
            )
            cand = frozenset(ranked[:l])
            gain = sum(len(cand & open_[t]) for t in tids if cand <= sets[t])
            if gain == 0:
                continue
            key = (gain, len(cand), [-i for i in sorted(cand)])
            if best_key is None or key > best_key:
                best, best_key = cand, key
        bins.append(tuple(sorted(best, key=lambda i: (-len(owners[i]), i))))
        for t in tids:
            if best <= sets[t]:
                open_[t] -= best
    return _recover(PackingScheme(l, bins, {}), sets, drop_unused=False)


def _recover(scheme: PackingScheme, sets: Mapping[int, frozenset], drop_unused: bool = True) -> PackingScheme:
    """Recompute every cover greedily from all bins, then drop unused bins; repeat to a fixpoint."""
    bins = list(scheme.bins)
    while True:
        bin_sets = [frozenset(b) for b in bins]
        cover = {}
        for tid in sorted(sets):
            remaining = set(sets[tid])
            chosen = []
            while remaining:
                best, gain = None, 0
                for i, bs in enumerate(bin_sets):
                    if bs <= sets[tid]:
                        g = len(bs & remaining)
                        if g > gain:
                            best, gain = i, g
                if best is None:
                    raise ValueError(f"bins cannot cover tensor {tid}")
                chosen.append(best)
                remaining -= bin_sets[best]
            cover[tid] = sorted(chosen)
        used = sorted({b for idxs in cover.values() for b in idxs})
        if not drop_unused or len(used) == len(bins):
            return PackingScheme(scheme.capacity, bins, cover)
        bins = [bins[i] for i in used]


def pack_two_stage(own: Ownership, l: int) -> PackingScheme:
    """Greedy-1, then repack the items of its non-full bins.

    Full stage-1 bins are kept verbatim. Stage 2 runs Greedy-2 over each
    tensor's residue (largest-first as published, plus smallest-first and
    owner-affinity bin forming, plus a set-cover pass on small groups) and
    keeps the variant with the fewest bins. If no variant beats the
    non-full stage-1 bins, the stage-1 result is returned.
    """
    stage1 = pack_classes(compute_equivalent_classes(own), l)
    full = [b for b in stage1.bins if len(b) == l]
    partial = [i for i, b in enumerate(stage1.bins) if len(b) < l]
    if len(partial) < 2:
        return stage1

    partial_set = set(partial)
    residues = {}
    for tid, idxs in stage1.cover.items():
        items = [item for b in idxs if b in partial_set for item in stage1.bins[b]]
        if items:
            residues[tid] = items

    candidates = [
        pack_approx(residues, l, existing=full, largest_first=lf, affinity=aff)
        for aff in (False, True)
        for lf in (True, False)
    ]
    if len(residues) <= SET_COVER_MAX_TENSORS:
        candidates.append(pack_set_cover(residues, l, existing=full))
    best = None
    for cand in candidates:
        cand = _recover(cand, own.sets)
        if best is None or cand.num_bins < best.num_bins:
            best = cand
    if best.num_bins >= stage1.num_bins:
        return stage1
    return best


def pack_baseline(own: Ownership, l: int, write_order: Optional[Sequence[int]] = None) -> PackingScheme:
    """Pack each tensor's items in write order, then merge bins with equal item sets."""
    _check_capacity(l)
    order = own.tensors if write_order is None else list(write_order)
    scheme = PackingScheme(l)
    seen: dict[frozenset, int] = {}
    for tid in order:
        idxs = []
        for chunk in _chunks(own.order[tid], l):
            key = frozenset(chunk)
            if key not in seen:
                seen[key] = len(scheme.bins)
                scheme.bins.append(chunk)
            idxs.append(seen[key])
        scheme.cover[tid] = idxs
    return scheme


@dataclass
class SchemeDiff:
    reused: list[frozenset]
    discarded: list[frozenset]
    created: list[frozenset]


def diff_schemes(old: PackingScheme, new: PackingScheme) -> SchemeDiff:
    """Compare two schemes bin by bin, by item set."""
    old_sets = list(dict.fromkeys(frozenset(b) for b in old.bins))
    new_sets = list(dict.fromkeys(frozenset(b) for b in new.bins))
    old_lookup, new_lookup = set(old_sets), set(new_sets)
    return SchemeDiff(
        reused=[b for b in new_sets if b in old_lookup],
        discarded=[b for b in old_sets if b not in new_lookup],
        created=[b for b in new_sets if b not in old_lookup],
    )


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_scheme(scheme: PackingScheme, own: Ownership, l: Optional[int] = None) -> ValidationReport:
    """Check the capacity and exact-cover constraints; never raises."""
    l = scheme.capacity if l is None else l
    report = ValidationReport()
    for i, b in enumerate(scheme.bins):
        if len(b) > l:
            report.violations.append(f"capacity: bin {i} holds {len(b)} items > {l}")
    for tid in own.tensors:
        want = own.sets[tid]
        idxs = scheme.cover.get(tid)
        if idxs is None:
            report.violations.append(f"cover: tensor {tid} has no cover")
            continue
        got = set()
        for b in idxs:
            if not 0 <= b < len(scheme.bins):
                report.violations.append(f"cover: tensor {tid} names missing bin {b}")
                continue
            foreign = set(scheme.bins[b]) - want
            if foreign:
                report.violations.append(
                    f"cover: tensor {tid} bin {b} holds foreign items {sorted(foreign)}"
                )
            got.update(scheme.bins[b])
        missing = want - got
        if missing:
            report.violations.append(f"cover: tensor {tid} misses items {sorted(missing)}")
    for tid in scheme.cover:
        if tid not in own.sets:
            report.violations.append(f"cover: unknown tensor {tid}")
    return report


def min_bins_lower_bound(own: Ownership, l: int) -> int:
    """Cheap lower bound on any valid scheme's bin count."""
    return max(
        math.ceil(len(own.owners) / l),
        max(math.ceil(len(s) / l) for s in own.sets.values()),
    )


PACKERS = {
    "baseline": lambda own, l: pack_baseline(own, l),
    "greedy1": lambda own, l: pack_classes(compute_equivalent_classes(own), l),
    "greedy2": lambda own, l: pack_approx(own.order, l),
    "two-stage": pack_two_stage,
}
