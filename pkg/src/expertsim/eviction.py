"""Eviction policies over cached experts.

Keys are (layer, expert) identity pairs; the engine tracks which precision
a resident copy holds. Contract: select_victim removes the returned victim
from the policy's own bookkeeping and the caller must then evict it from
the cache, so policy state always mirrors the resident set (frequency and
score policies additionally keep run-lifetime history for evicted keys).
Every tie ultimately breaks toward the lower (layer, expert).
"""

from __future__ import annotations

import itertools
from collections import OrderedDict, deque
from typing import NamedTuple

from .models import ConfigError

Ident = tuple[int, int]


class AccessContext(NamedTuple):
    layer: int
    pass_id: int
    gate_score: float | None = None
    precision: str | None = None


class EvictionPolicy:
    """Base class; subclasses fill in the per-policy rule."""

    name = "base"

    def __init__(self) -> None:
        self._last_pass: int | None = None

    def begin_pass(self, pass_id: int) -> None:
        if self._last_pass is not None and pass_id <= self._last_pass:
            raise RuntimeError(
                f"begin_pass ids must strictly increase: {self._last_pass} -> {pass_id}"
            )
        self._last_pass = pass_id
        self._begin(pass_id)

    def _begin(self, pass_id: int) -> None:
        pass

    def note_access(self, key: Ident, ctx: AccessContext) -> None:
        """A demand access of a resident (or just-admitted) expert."""
        raise NotImplementedError

    def note_admit(self, key: Ident, ctx: AccessContext) -> None:
        """An expert became resident (demand fetch or prefetch completion)."""
        raise NotImplementedError

    def note_prefetch_hit(self, key: Ident, ctx: AccessContext) -> None:
        """Prefetch selected an expert that is already resident."""
        # Only position-aware policies care; a speculative selection is not
        # an access for recency/frequency purposes.

    def select_victim(self, ctx: AccessContext, forced: bool) -> Ident | None:
        raise NotImplementedError


class LRUPolicy(EvictionPolicy):
    """Evict the least recently accessed resident."""

    name = "lru"

    def __init__(self) -> None:
        super().__init__()
        self._order: OrderedDict[Ident, None] = OrderedDict()

    def note_access(self, key: Ident, ctx: AccessContext) -> None:
        self._order[key] = None
        self._order.move_to_end(key)

    def note_admit(self, key: Ident, ctx: AccessContext) -> None:
        self._order[key] = None
        self._order.move_to_end(key)

    def select_victim(self, ctx: AccessContext, forced: bool) -> Ident | None:
        if not self._order:
            return None
        victim = next(iter(self._order))
        del self._order[victim]
        return victim


class LFUPolicy(EvictionPolicy):
    """Evict the resident with the lowest run-lifetime access count.

    Counts persist across evictions. Ties fall to the older last touch,
    then the lower key.
    """

    name = "lfu"

    def __init__(self) -> None:
        super().__init__()
        self._resident: set[Ident] = set()
        self._count: dict[Ident, int] = {}
        self._touch_seq: dict[Ident, int] = {}
        self._seq = itertools.count()

    def _touch(self, key: Ident) -> None:
        self._touch_seq[key] = next(self._seq)

    def note_access(self, key: Ident, ctx: AccessContext) -> None:
        self._count[key] = self._count.get(key, 0) + self._count_step(ctx)
        self._touch(key)

    def _count_step(self, ctx: AccessContext) -> int:
        return 1

    def note_admit(self, key: Ident, ctx: AccessContext) -> None:
        self._resident.add(key)
        self._count.setdefault(key, 0)
        self._touch(key)

    def select_victim(self, ctx: AccessContext, forced: bool) -> Ident | None:
        if not self._resident:
            return None
        victim = min(
            self._resident,
            key=lambda k: (self._count.get(k, 0), self._touch_seq.get(k, -1), k),
        )
        self._resident.discard(victim)
        return victim


class LHUPolicy(LFUPolicy):
    """LFU variant that only counts accesses served at the highest precision."""

    name = "lhu"

    def __init__(self, highest_precision: str) -> None:
        super().__init__()
        self._highest = highest_precision

    def _count_step(self, ctx: AccessContext) -> int:
        return 1 if ctx.precision == self._highest else 0


class FLDPolicy(EvictionPolicy):
    """Evict the resident whose layer is cyclically farthest ahead.

    Distance of a resident at layer l from current layer c is
    (l - c) mod L; the victim maximizes it, ties to the lower expert index.
    """

    name = "fld"

    def __init__(self, num_layers: int) -> None:
        super().__init__()
        self._L = num_layers
        self._resident: set[Ident] = set()

    def note_access(self, key: Ident, ctx: AccessContext) -> None:
        self._resident.add(key)

    def note_admit(self, key: Ident, ctx: AccessContext) -> None:
        self._resident.add(key)

    def select_victim(self, ctx: AccessContext, forced: bool) -> Ident | None:
        if not self._resident:
            return None
        victim = min(
            self._resident,
            key=lambda k: (-((k[0] - ctx.layer) % self._L), k[1], k[0]),
        )
        self._resident.discard(victim)
        return victim


class SBPolicy(EvictionPolicy):
    """Evict the resident with the lowest decayed accumulated gate score.

    Scores accumulate per residency (an evicted expert re-enters at zero)
    and are multiplied by `decay` at every pass boundary, so an entrenched
    high scorer outranks a just-admitted expert regardless of where either
    sits in the layer sequence. Ties to the lower key.
    """

    name = "sb"

    def __init__(self, decay: float = 0.9) -> None:
        super().__init__()
        if not (0.0 < decay <= 1.0):
            raise ConfigError(f"sb decay must be in (0, 1], got {decay}")
        self.decay = decay
        self._resident: set[Ident] = set()
        self._signal: dict[Ident, float] = {}

    def _begin(self, pass_id: int) -> None:
        for key in self._signal:
            self._signal[key] *= self.decay

    def note_access(self, key: Ident, ctx: AccessContext) -> None:
        if ctx.gate_score is not None:
            self._signal[key] = self._signal.get(key, 0.0) + ctx.gate_score
        else:
            self._signal.setdefault(key, 0.0)

    def note_admit(self, key: Ident, ctx: AccessContext) -> None:
        self._resident.add(key)
        self._signal.setdefault(key, 0.0)

    def select_victim(self, ctx: AccessContext, forced: bool) -> Ident | None:
        if not self._resident:
            return None
        victim = min(self._resident, key=lambda k: (self._signal.get(k, 0.0), k))
        self._resident.discard(victim)
        self._signal.pop(victim, None)
        return victim


class LSPolicy(EvictionPolicy):
    """Least-Stale eviction: two FIFO queues keyed by layer-execution order.

    Experts touched (accessed, admitted, or selected by prefetch) during the
    running pass sit in the current queue; everything carried over from
    earlier passes sits in the stale queue, in the layer order of its last
    pass. Eviction pops the stale head. With the stale queue empty, a forced
    request (demand fetch that must be admitted) pops the current head; an
    unforced request (prefetch) is refused.

    Queue membership uses lazy deletion: each entry carries a generation
    stamp and is dead if the key has moved since, so promotion is O(log n)-
    free dict work and popping skips corpses in amortized O(1).
    """

    name = "ls"

    def __init__(self) -> None:
        super().__init__()
        self._stale: deque[tuple[Ident, int]] = deque()
        self._current: deque[tuple[Ident, int]] = deque()
        self._where: dict[Ident, tuple[str, int]] = {}
        self._gen = itertools.count()
        self.forced_current_evictions = 0
        self.unforced_current_evictions = 0  # must stay 0; structural guarantee
        self.refusals = 0

    def _touch(self, key: Ident) -> None:
        loc = self._where.get(key)
        if loc is not None and loc[0] == "current":
            return  # first touch of the pass fixed its position
        gen = next(self._gen)
        self._current.append((key, gen))
        self._where[key] = ("current", gen)

    def note_access(self, key: Ident, ctx: AccessContext) -> None:
        self._touch(key)

    def note_admit(self, key: Ident, ctx: AccessContext) -> None:
        self._touch(key)

    def note_prefetch_hit(self, key: Ident, ctx: AccessContext) -> None:
        self._touch(key)

    def _begin(self, pass_id: int) -> None:
        for key, gen in self._current:
            if self._where.get(key) == ("current", gen):
                g = next(self._gen)
                self._stale.append((key, g))
                self._where[key] = ("stale", g)
        self._current.clear()

    def _pop_live(self, queue: deque[tuple[Ident, int]], tag: str) -> Ident | None:
        while queue:
            key, gen = queue.popleft()
            if self._where.get(key) == (tag, gen):
                del self._where[key]
                return key
        return None

    def select_victim(self, ctx: AccessContext, forced: bool) -> Ident | None:
        victim = self._pop_live(self._stale, "stale")
        if victim is not None:
            return victim
        if not forced:
            self.refusals += 1
            return None
        victim = self._pop_live(self._current, "current")
        if victim is not None:
            self.forced_current_evictions += 1
        return victim

    def stale_size(self) -> int:
        return sum(1 for k, g in self._stale if self._where.get(k) == ("stale", g))

    def current_size(self) -> int:
        return sum(1 for k, g in self._current if self._where.get(k) == ("current", g))


EVICTION_NAMES = ("lru", "lfu", "lhu", "fld", "sb", "ls")


def make_eviction_policy(
    name: str, num_layers: int, highest_precision: str, sb_decay: float = 0.9
) -> EvictionPolicy:
    """Instantiate an eviction policy by config token."""
    if name == "lru":
        return LRUPolicy()
    if name == "lfu":
        return LFUPolicy()
    if name == "lhu":
        return LHUPolicy(highest_precision)
    if name == "fld":
        return FLDPolicy(num_layers)
    if name == "sb":
        return SBPolicy(sb_decay)
    if name == "ls":
        return LSPolicy()
    raise ConfigError(
        f"unknown eviction policy {name!r}; expected one of {', '.join(EVICTION_NAMES)}"
    )
