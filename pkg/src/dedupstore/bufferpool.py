"""Fixed-capacity page cache with locality sets and cost-based eviction.

Each cached page sits in one locality set. A set nominates its own next
victim (least or most recently used, per its policy) and the pool evicts the
nominee with the lowest expected eviction cost

    c_w [if dirty] + p_reuse * c_r,   p_reuse = 1 - exp(-sum(lambda_i) * t)

where lambda_i ranges over the request rates of the models sharing the page.
Sets marked transient are drained before any cost comparison.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict, defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional, Protocol

from .errors import PoolFullError

LRU, MRU = "LRU", "MRU"
PERSISTENT, TRANSIENT = "persistent", "transient"


@dataclass(frozen=True)
class CostModelConfig:
    write_cost: float = 1.0
    read_cost: float = 1.0
    horizon: float = 1.0

    def __post_init__(self):
        if self.write_cost < 0:
            raise ValueError("write_cost must be >= 0")
        if not self.read_cost > 0:
            raise ValueError("read_cost must be > 0")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")


class RateSource(Protocol):
    def total_rate(self, page_id: int) -> float: ...


class AccessRateTable:
    """Per-model request rates and the set of models owning each page.

    A model's rate is static (``set_rate``) until ``record_request`` is called
    for it; from then on it is the request count inside the sliding window
    divided by the window length.
    """

    def __init__(
        self,
        rates: Optional[Mapping[int, float]] = None,
        owners: Optional[Mapping[int, Iterable[int]]] = None,
        window: float = 10.0,
    ):
        if not window > 0:
            raise ValueError("window must be > 0")
        self.window = window
        self._static: dict[int, float] = {}
        self._requests: dict[int, deque] = {}
        self._now = -math.inf
        self.owners: dict[int, frozenset] = {}
        for m, lam in (rates or {}).items():
            self.set_rate(m, lam)
        for pid, ms in (owners or {}).items():
            self.set_owners(pid, ms)

    def set_rate(self, model_id: int, rate: float) -> None:
        if rate < 0:
            raise ValueError(f"rate for model {model_id} must be >= 0, got {rate}")
        self._static[model_id] = float(rate)
        self._requests.pop(model_id, None)

    def set_owners(self, page_id: int, models: Iterable[int]) -> None:
        models = frozenset(models)
        if not models:
            raise ValueError(f"page {page_id} needs at least one owner")
        self.owners[page_id] = models

    def record_request(self, model_id: int, timestamp: float) -> None:
        self._now = max(self._now, timestamp)
        self._requests.setdefault(model_id, deque()).append(timestamp)

    def rate(self, model_id: int) -> float:
        q = self._requests.get(model_id)
        if q is None:
            return self._static.get(model_id, 0.0)
        cutoff = self._now - self.window
        while q and q[0] <= cutoff:
            q.popleft()
        return len(q) / self.window

    def total_rate(self, page_id: int) -> float:
        return sum(self.rate(m) for m in self.owners.get(page_id, ()))


def reuse_probability(page_id: int, rates: RateSource, t: float) -> float:
    """Chance the page is touched within ``t`` ticks; untracked pages get 0."""
    return -math.expm1(-rates.total_rate(page_id) * t)


def eviction_cost(page_id: int, cfg: CostModelConfig, rates: RateSource, dirty: bool = False) -> float:
    write = cfg.write_cost if dirty else 0.0
    return write + reuse_probability(page_id, rates, cfg.horizon) * cfg.read_cost


@dataclass(frozen=True)
class Candidate:
    set_id: int
    page_id: int
    dirty: bool = False
    transient: bool = False


def choose_victim(candidates: Iterable[Candidate], cfg: CostModelConfig, rates: RateSource) -> tuple[int, int]:
    """Cheapest nominee, transient sets first, ties to the lowest set id."""
    cands = list(candidates)
    if not cands:
        raise PoolFullError("no unpinned page can be evicted")
    transient = [c for c in cands if c.transient]
    pool = transient or cands
    best = min(pool, key=lambda c: (eviction_cost(c.page_id, cfg, rates, c.dirty), c.set_id))
    return best.set_id, best.page_id


class RecencyRates:
    """Per-page rate 1 / (ticks since last reference + 1), the sharing-blind estimate."""

    def __init__(self):
        self.now = 0.0
        self.last_ref: dict[int, float] = {}

    def touch(self, page_id: int) -> None:
        self.last_ref[page_id] = self.now

    def total_rate(self, page_id: int) -> float:
        ref = self.last_ref.get(page_id)
        if ref is None:
            return 0.0
        return 1.0 / (self.now - ref + 1.0)


@dataclass
class LocalitySet:
    set_id: int
    policy: str = LRU
    durability: str = PERSISTENT
    # page id -> None, oldest reference first
    members: OrderedDict = field(default_factory=OrderedDict)

    def __post_init__(self):
        if self.policy not in (LRU, MRU):
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.durability not in (PERSISTENT, TRANSIENT):
            raise ValueError(f"unknown durability {self.durability!r}")

    def nominee(self, pinned) -> Optional[int]:
        order = self.members if self.policy == LRU else reversed(self.members)
        return next((p for p in order if not pinned.get(p)), None)


@dataclass
class PoolStats:
    hits: int = 0
    misses: int = 0
    per_set: dict = field(default_factory=lambda: defaultdict(lambda: [0, 0]))

    @property
    def hit_ratio(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def dump(self) -> str:
        lines = [f"set={s} hits={h} misses={m}" for s, (h, m) in sorted(self.per_set.items())]
        lines.append(f"total hit_ratio={self.hit_ratio:.4f}")
        return "\n".join(lines) + "\n"


class PageHandle:
    def __init__(self, pool: BufferPool, page_id: int, page: Any):
        self._pool = pool
        self.page_id = page_id
        self.page = page
        self.released = False

    def release(self) -> None:
        if not self.released:
            self.released = True
            self._pool._unpin(self.page_id)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()


class BufferPool:
    """Page cache of ``capacity`` frames filled by ``loader(page_id)``.

    ``cost_mode="sharing"`` rates pages by the request rates of all models
    that share them; ``"recency"`` rates each page only by the time since it
    was last referenced.
    """

    def __init__(
        self,
        capacity: int,
        loader: Callable[[int], Any],
        cfg: CostModelConfig = CostModelConfig(),
        rates: Optional[AccessRateTable] = None,
        cost_mode: str = "sharing",
    ):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if cost_mode not in ("sharing", "recency"):
            raise ValueError(f"unknown cost mode {cost_mode!r}")
        self.capacity = capacity
        self.loader = loader
        self.cfg = cfg
        self.cost_mode = cost_mode
        self.rates = rates if rates is not None else AccessRateTable()
        self.recency = RecencyRates()
        self.sets: dict[int, LocalitySet] = {}
        self.frames: dict[int, Any] = {}
        self.set_of: dict[int, int] = {}
        self.pins: dict[int, int] = defaultdict(int)
        self.dirty: set[int] = set()
        self.stats = PoolStats()
        self.evictions: list[tuple[int, int]] = []
        self._lock = threading.RLock()

    def add_locality_set(self, set_id: int, policy: str = LRU, durability: str = PERSISTENT) -> LocalitySet:
        with self._lock:
            ls = self.sets.get(set_id)
            if ls is None:
                ls = self.sets[set_id] = LocalitySet(set_id, policy, durability)
            return ls

    def advance(self, now: float) -> None:
        """Move the pool clock used by the recency estimate."""
        self.recency.now = now

    @property
    def rate_source(self) -> RateSource:
        return self.rates if self.cost_mode == "sharing" else self.recency

    def __len__(self):
        return len(self.frames)

    def __contains__(self, page_id):
        return page_id in self.frames

    def fetch(self, page_id: int, set_id: int = 0) -> PageHandle:
        with self._lock:
            ls = self.sets.get(set_id) or self.add_locality_set(set_id)
            counts = self.stats.per_set[set_id]
            if page_id in self.frames:
                self.stats.hits += 1
                counts[0] += 1
                old = self.set_of[page_id]
                if old != set_id:
                    del self.sets[old].members[page_id]
                    self.set_of[page_id] = set_id
                ls.members.pop(page_id, None)
            else:
                if len(self.frames) >= self.capacity:
                    self._evict()
                self.stats.misses += 1
                counts[1] += 1
                self.frames[page_id] = self.loader(page_id)
                self.set_of[page_id] = set_id
            ls.members[page_id] = None
            self.recency.touch(page_id)
            self.pins[page_id] += 1
            return PageHandle(self, page_id, self.frames[page_id])

    def _unpin(self, page_id: int) -> None:
        with self._lock:
            self.pins[page_id] -= 1
            if self.pins[page_id] <= 0:
                del self.pins[page_id]

    def mark_dirty(self, page_id: int) -> None:
        with self._lock:
            if page_id not in self.frames:
                raise KeyError(f"page {page_id} is not cached")
            self.dirty.add(page_id)

    def candidates(self) -> list[Candidate]:
        out = []
        for sid in sorted(self.sets):
            ls = self.sets[sid]
            pid = ls.nominee(self.pins)
            if pid is not None:
                out.append(Candidate(sid, pid, pid in self.dirty, ls.durability == TRANSIENT))
        return out

    def choose_victim(self) -> tuple[int, int]:
        with self._lock:
            cands = self.candidates()
            if not cands:
                raise PoolFullError(f"all {len(self.frames)} cached pages are pinned")
            return choose_victim(cands, self.cfg, self.rate_source)

    def _evict(self) -> None:
        sid, pid = self.choose_victim()
        del self.sets[sid].members[pid]
        del self.frames[pid]
        del self.set_of[pid]
        self.dirty.discard(pid)
        self.evictions.append((sid, pid))
