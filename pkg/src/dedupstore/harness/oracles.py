"""Independent reference implementations used to check the fast paths."""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from typing import Optional

import numpy as np

from ..packing import Ownership, PackingScheme, min_bins_lower_bound

MAX_BRUTE_FORCE_ITEMS = 24


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


DENSE_ACTIVATIONS = {"relu": lambda x: np.maximum(x, 0.0), "sigmoid": _sigmoid, "tanh": np.tanh}


def dense_oracle_infer(weights, biases, inputs, activations) -> np.ndarray:
    """Plain numpy forward pass: x <- act(x @ W + b) for each layer."""
    x = np.asarray(inputs, dtype=np.float64)
    if not len(weights) == len(biases) == len(activations):
        raise ValueError("weights, biases and activations must have equal length")
    for w, b, act in zip(weights, biases, activations):
        w = np.asarray(w, dtype=np.float64)
        if x.shape[-1] != w.shape[0]:
            raise ValueError(f"input width {x.shape[-1]} does not match weight rows {w.shape[0]}")
        x = DENSE_ACTIVATIONS[act](x @ w + np.asarray(b, dtype=np.float64))
    return x


def _item_groups(candidates, own: Ownership, chosen):
    groups = defaultdict(list)
    for item in candidates:
        where = frozenset(k for k, b in enumerate(chosen) if item in b)
        groups[(own.owners[item], where)].append(item)
    return [sorted(g) for _, g in sorted(groups.items(), key=lambda kv: min(kv[1]))]


def _compositions(sizes, total):
    """Count vectors c with 0 <= c[i] <= sizes[i] and sum(c) == total."""
    if not sizes:
        if total == 0:
            yield ()
        return
    head, rest = sizes[0], sizes[1:]
    for c in range(min(head, total), -1, -1):
        if total - c <= sum(rest):
            for tail in _compositions(rest, total - c):
                yield (c,) + tail


def brute_force_pack(own: Ownership, l: int, max_bins: Optional[int] = None) -> Optional[PackingScheme]:
    """Exact minimum-bin scheme by exhaustive search, or None if none fits in ``max_bins``.

    Search uses iterative deepening on the bin count. Two reductions keep it
    exhaustive: a bin can always be grown to min(l, |intersection of the
    tensors it serves|) items without breaking any cover, and items with the
    same owner set that sit in the same chosen bins are interchangeable.
    """
    if l < 1:
        raise ValueError("capacity must be >= 1")
    if len(own.items) > MAX_BRUTE_FORCE_ITEMS:
        raise ValueError(
            f"brute force refuses {len(own.items)} items (limit {MAX_BRUTE_FORCE_ITEMS})"
        )
    tensors = own.tensors
    sets = own.sets
    if max_bins is None:
        max_bins = sum(math.ceil(len(s) / l) for s in sets.values())

    def uncovered(chosen):
        out = {}
        for t in tensors:
            got = set()
            for b in chosen:
                if b <= sets[t]:
                    got |= b
            rest = sets[t] - got
            if rest:
                out[t] = rest
        return out

    def search(chosen, budget):
        open_ = uncovered(chosen)
        if not open_:
            return list(chosen)
        left = budget - len(chosen)
        union = set().union(*open_.values())
        need = max(math.ceil(len(union) / l), max(math.ceil(len(u) / l) for u in open_.values()))
        if need > left:
            return None
        t = max(open_, key=lambda x: (len(open_[x]), -x))
        i = min(open_[t])
        others = [s for s in tensors if s != t and i in sets[s]]
        tried = set()
        for r in range(len(others) + 1):
            for extra in itertools.combinations(others, r):
                common = frozenset(sets[t].intersection(*(sets[s] for s in extra)))
                if len(common) <= l:
                    options = [common]
                else:
                    groups = _item_groups(common - {i}, own, chosen)
                    options = []
                    for counts in _compositions([len(g) for g in groups], l - 1):
                        picked = [i]
                        for g, c in zip(groups, counts):
                            picked.extend(g[:c])
                        options.append(frozenset(picked))
                for b in options:
                    if b in tried or b in chosen:
                        continue
                    tried.add(b)
                    chosen.append(b)
                    found = search(chosen, budget)
                    chosen.pop()
                    if found is not None:
                        return found
        return None

    for n in range(min_bins_lower_bound(own, l), max_bins + 1):
        found = search([], n)
        if found is not None:
            bins = [tuple(sorted(b)) for b in found]
            cover = {t: [k for k, b in enumerate(found) if b <= sets[t]] for t in tensors}
            return PackingScheme(l, bins, cover)
    return None
