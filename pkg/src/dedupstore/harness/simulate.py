"""Trace-driven buffer pool simulation over per-model page scans."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from ..bufferpool import LRU, MRU, AccessRateTable, BufferPool, CostModelConfig, PoolStats
from ..errors import FormatError
from .family import read_kv_file

# policy -> (locality sets by page owners?, within-set policy, cost mode)
POLICIES = {
    "LRU": (False, LRU, "recency"),
    "MRU": (False, MRU, "recency"),
    "locality-set": (True, LRU, "recency"),
    "locality-set-L": (True, LRU, "recency"),
    "locality-set-M": (True, MRU, "recency"),
    "optimized-L": (True, LRU, "sharing"),
    "optimized-M": (True, MRU, "sharing"),
}

SHARED_SET = 0


@dataclass(frozen=True)
class WorkloadSpec:
    rates: tuple[float, ...]
    ticks: int = 200
    capacity_pages: Optional[int] = None
    policy: str = "optimized-L"
    seed: int = 0

    def __post_init__(self):
        if any(r < 0 for r in self.rates):
            raise ValueError(f"rates must be non-negative, got {self.rates}")
        if self.ticks < 1:
            raise ValueError("ticks must be >= 1")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {sorted(POLICIES)}")
        if self.capacity_pages is not None and self.capacity_pages < 1:
            raise ValueError("capacity_pages must be >= 1")

    @classmethod
    def from_file(cls, path) -> WorkloadSpec:
        values = read_kv_file(path, "workload")
        try:
            kwargs = {"rates": tuple(float(r) for r in values.pop("rates").split(","))}
            for key in ("ticks", "capacity_pages", "seed"):
                if key in values:
                    kwargs[key] = int(values.pop(key))
            if "policy" in values:
                kwargs["policy"] = values.pop("policy")
        except KeyError:
            raise FormatError(f"{path}: missing required key 'rates'") from None
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        if values:
            raise FormatError(f"{path}: unknown keys {sorted(values)}")
        return cls(**kwargs)


@dataclass
class SimulationResult:
    policy: str
    capacity: int
    stats: PoolStats
    trace: list[tuple[int, int, int, bool]] = field(default_factory=list)

    @property
    def hit_ratio(self) -> float:
        return self.stats.hit_ratio


def request_sequence(rates: Mapping[int, float], ticks: int, seed: int) -> list[tuple[int, int]]:
    """(tick, model) pairs: Poisson arrivals per model per tick, shuffled within a tick."""
    rng = np.random.default_rng(seed)
    models = sorted(rates)
    out = []
    for tick in range(ticks):
        batch = []
        for m in models:
            batch += [m] * int(rng.poisson(rates[m]))
        rng.shuffle(batch)
        out += [(tick, m) for m in batch]
    return out


def page_owners(model_pages: Mapping[int, Sequence[int]]) -> dict[int, frozenset]:
    owners: dict[int, set] = {}
    for m, pages in model_pages.items():
        for p in pages:
            owners.setdefault(p, set()).add(m)
    return {p: frozenset(ms) for p, ms in owners.items()}


def simulate(
    model_pages: Mapping[int, Sequence[int]],
    rates: Mapping[int, float],
    ticks: int,
    capacity: int,
    policy: str,
    seed: int = 0,
    cfg: CostModelConfig = CostModelConfig(),
    loader: Optional[Callable[[int], object]] = None,
) -> SimulationResult:
    """Serve each request by scanning its model's pages through one buffer pool.

    With locality sets, pages shared by several models form set 0 and each
    model's private pages form their own set.
    """
    try:
        grouped, within, cost_mode = POLICIES[policy]
    except KeyError:
        raise ValueError(f"unknown policy {policy!r}; expected one of {sorted(POLICIES)}") from None
    owners = page_owners(model_pages)
    table = AccessRateTable(rates, owners)
    pool = BufferPool(capacity, loader or (lambda pid: pid), cfg, table, cost_mode)
    models = sorted(model_pages)
    set_of = {}
    for p, ms in owners.items():
        if not grouped or len(ms) > 1:
            set_of[p] = SHARED_SET
        else:
            (m,) = ms
            set_of[p] = 1 + models.index(m)
    for sid in sorted(set(set_of.values())):
        pool.add_locality_set(sid, within)

    result = SimulationResult(policy, capacity, pool.stats)
    for tick, m in request_sequence(rates, ticks, seed):
        pool.advance(tick)
        for p in model_pages[m]:
            hit = p in pool
            pool.fetch(p, set_of[p]).release()
            result.trace.append((tick, m, p, hit))
    return result
