"""Discrete-event simulation of expert caching over a routing trace.

One run is a single timeline in integer microseconds. Each layer event goes
through three phases: route the token rows, resolve every demanded unique
expert against the cache (blocking on demand transfers), then submit
prefetches for the next layer and let the watchdog start what fits. The
compute window advances the clock last; the transfer channel carries
absolute completion times, so transfers finish "during" compute and are
settled at the next event boundary.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .eviction import AccessContext, EVICTION_NAMES, make_eviction_policy
from .metrics import (
    AccessRec,
    DROP as DROP_OUTCOME,
    EvictRec,
    HIT,
    MISS_FETCH,
    MISS_WAIT,
    PassRec,
    PredictionRec,
    PrefetchRec,
    ResidencyHistory,
    RouteRec,
    SUBST as SUBST_OUTCOME,
    build_report,
    classify_miss,
)
from .miss import (
    DROP as MISS_DROP,
    DROPPED,
    FETCH,
    FETCH_PRIORITY,
    FETCHED,
    MissConfig,
    SUBST,
    SUBSTITUTED,
    resolve_miss,
)
from .models import (
    ConfigError,
    HardwareSpec,
    ModelSpec,
    resolve_capacity,
    transfer_us,
)
from .prefetch import (
    NONE,
    PREFETCH_MODES,
    PrefetchQueue,
    PrefetchRequest,
    apply_prediction_noise,
    predict_event,
    watchdog_step,
)
from .routing import (
    CACHE_AWARE,
    DeltaAvgState,
    STANDARD,
    route_event,
    validate_lambda,
)
from .trace import Trace

Ident = tuple[int, int]

DEMAND = "demand"
PREFETCH = "prefetch"


@dataclass(frozen=True)
class SimConfig:
    """Everything one simulation run depends on, minus the trace."""

    model: ModelSpec
    hardware: HardwareSpec = HardwareSpec(capacity_fraction=0.05)
    working_precision: str = "fp16"
    routing: str = STANDARD
    lam: float = 0.3
    eviction: str = "lru"
    sb_decay: float = 0.9
    prefetch: str = NONE
    overfetch: float = 1.0
    percentile: float = 80.0
    prefetch_noise: float = 0.0
    miss: str = FETCH
    drop_rank_threshold: int = 2
    subst_tolerance: float = 0.05
    degrade_percentile: float = 60.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.working_precision not in self.model.precisions:
            raise ConfigError(
                f"working precision {self.working_precision!r} not in model "
                f"precisions {self.model.precisions}"
            )
        if self.routing not in (STANDARD, CACHE_AWARE):
            raise ConfigError(f"unknown routing policy {self.routing!r}")
        validate_lambda(self.lam)
        if self.eviction not in EVICTION_NAMES:
            raise ConfigError(
                f"unknown eviction policy {self.eviction!r}; "
                f"expected one of {', '.join(EVICTION_NAMES)}"
            )
        if self.prefetch not in PREFETCH_MODES:
            raise ConfigError(
                f"unknown prefetch mode {self.prefetch!r}; "
                f"expected one of {', '.join(PREFETCH_MODES)}"
            )
        if self.overfetch <= 0:
            raise ConfigError(f"overfetch must be positive, got {self.overfetch}")
        if not (0.0 <= self.percentile < 100.0):
            raise ConfigError(f"percentile must be in [0, 100), got {self.percentile}")
        if not (0.0 <= self.prefetch_noise <= 1.0):
            raise ConfigError(
                f"prefetch_noise must be in [0, 1], got {self.prefetch_noise}"
            )
        self.miss_config()  # validates the miss fields
        capacity = self.capacity_bytes()
        working_bytes = self.model.expert_bytes(self.working_precision)
        if self.miss in (FETCH, MISS_DROP, SUBST) and capacity < working_bytes:
            raise ConfigError(
                f"capacity {capacity} B cannot hold one {self.working_precision} "
                f"expert ({working_bytes} B) required by miss policy {self.miss!r}"
            )
        if self.eviction == "lhu" and self.miss != FETCH_PRIORITY:
            warnings.warn(
                "lhu eviction tracks precision levels and is intended to pair "
                "with miss=fetch_priority",
                stacklevel=2,
            )

    def miss_config(self) -> MissConfig:
        return MissConfig(
            policy=self.miss,
            drop_rank_threshold=self.drop_rank_threshold,
            subst_tolerance=self.subst_tolerance,
            degrade_percentile=self.degrade_percentile,
        )

    def capacity_bytes(self) -> int:
        return resolve_capacity(self.model, self.hardware, self.working_precision)

    def echo(self) -> dict:
        """Config echo embedded in every report; key order is stable."""
        hw = self.hardware
        return {
            "model": {
                "name": self.model.name,
                "num_layers": self.model.num_layers,
                "experts_per_layer": self.model.experts_per_layer,
                "top_k": self.model.top_k,
                "expert_bytes_fp16": self.model.expert_bytes_fp16,
                "precisions": list(self.model.precisions),
            },
            "hardware": {
                "capacity_fraction": hw.capacity_fraction,
                "capacity_bytes": hw.capacity_bytes,
                "resolved_capacity_bytes": self.capacity_bytes(),
                "bandwidth_bytes_per_sec": hw.bandwidth_bytes_per_sec,
                "per_layer_compute_us": hw.per_layer_compute_us,
            },
            "working_precision": self.working_precision,
            "routing": self.routing,
            "lambda": self.lam,
            "eviction": self.eviction,
            "sb_decay": self.sb_decay,
            "prefetch": self.prefetch,
            "overfetch": self.overfetch,
            "percentile": self.percentile,
            "prefetch_noise": self.prefetch_noise,
            "miss": self.miss,
            "drop_rank_threshold": self.drop_rank_threshold,
            "subst_tolerance": self.subst_tolerance,
            "degrade_percentile": self.degrade_percentile,
            "seed": self.seed,
        }


class CacheState:
    """Resident experts plus in-flight byte reservations.

    The capacity invariant resident_bytes + reserved_bytes <= capacity holds
    at every mutation; reservations are taken when a transfer enters the
    channel and converted to resident bytes when it completes.
    """

    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self.residents: dict[Ident, tuple[str, int]] = {}
        self.resident_bytes = 0
        self.reserved_bytes = 0
        self.recorded_score: dict[Ident, float] = {}
        self._by_layer: dict[int, set[int]] = {}

    @property
    def free_bytes(self) -> int:
        return self.capacity - self.resident_bytes - self.reserved_bytes

    def is_resident(self, ident: Ident) -> bool:
        return ident in self.residents

    def precision_of(self, ident: Ident) -> str:
        return self.residents[ident][0]

    def reserve(self, nbytes: int) -> None:
        if nbytes > self.free_bytes:
            raise RuntimeError(
                f"reservation of {nbytes} B exceeds free {self.free_bytes} B"
            )
        self.reserved_bytes += nbytes

    def unreserve(self, nbytes: int) -> None:
        self.reserved_bytes -= nbytes
        assert self.reserved_bytes >= 0, "reservation accounting went negative"

    def admit(self, ident: Ident, precision: str, nbytes: int, score: float) -> None:
        if ident in self.residents:
            # precision replacement: the old copy's bytes free atomically
            self.evict(ident)
        self.residents[ident] = (precision, nbytes)
        self.resident_bytes += nbytes
        self.recorded_score[ident] = score
        self._by_layer.setdefault(ident[0], set()).add(ident[1])
        if self.resident_bytes + self.reserved_bytes > self.capacity:
            raise RuntimeError(
                f"capacity invariant broken: {self.resident_bytes} resident + "
                f"{self.reserved_bytes} reserved > {self.capacity}"
            )

    def evict(self, ident: Ident) -> tuple[str, int]:
        precision, nbytes = self.residents.pop(ident)
        self.resident_bytes -= nbytes
        assert self.resident_bytes >= 0, "resident byte accounting went negative"
        self.recorded_score.pop(ident, None)
        self._by_layer[ident[0]].discard(ident[1])
        return precision, nbytes

    def experts_in_layer(self, layer: int) -> set[int]:
        return self._by_layer.get(layer, set())

    def layer_residents(self, layer: int) -> list[tuple[int, float]]:
        """(expert, recorded_score) pairs of one layer, expert-sorted."""
        return [
            (e, self.recorded_score[(layer, e)])
            for e in sorted(self._by_layer.get(layer, ()))
        ]


@dataclass
class Transfer:
    ident: Ident
    nbytes: int
    kind: str                  # DEMAND | PREFETCH
    precision: str
    score: float
    submit_us: int
    start_us: int = 0
    completion_us: int = 0
    promoted: bool = False     # pending prefetch claimed by a demand miss


class Channel:
    """The single serialized transfer link between host and cache.

    Entries carry absolute start/completion times that are recomputed
    whenever the queue changes behind the active transfer. The active
    (head) transfer is never retimed or removed before completion.
    """

    def __init__(self, bandwidth_bytes_per_sec: int) -> None:
        self.bandwidth = bandwidth_bytes_per_sec
        self.queue: list[Transfer] = []

    def _retime(self) -> None:
        for i in range(1, len(self.queue)):
            prev = self.queue[i - 1]
            tr = self.queue[i]
            tr.start_us = max(prev.completion_us, tr.submit_us)
            tr.completion_us = tr.start_us + transfer_us(tr.nbytes, self.bandwidth)

    def append(
        self,
        ident: Ident,
        nbytes: int,
        kind: str,
        now_us: int,
        score: float,
        precision: str,
    ) -> Transfer:
        start = max(now_us, self.queue[-1].completion_us) if self.queue else now_us
        tr = Transfer(
            ident,
            nbytes,
            kind,
            precision,
            score,
            submit_us=now_us,
            start_us=start,
            completion_us=start + transfer_us(nbytes, self.bandwidth),
        )
        self.queue.append(tr)
        return tr

    def _demand_slot(self) -> int:
        """Index where a demand transfer goes: behind the active transfer
        and any earlier demands, ahead of every pending prefetch."""
        for i in range(1, len(self.queue)):
            if self.queue[i].kind == PREFETCH and not self.queue[i].promoted:
                return i
        return len(self.queue)

    def insert_demand(
        self, ident: Ident, nbytes: int, now_us: int, score: float, precision: str
    ) -> Transfer:
        tr = Transfer(ident, nbytes, DEMAND, precision, score, submit_us=now_us)
        self.queue.insert(self._demand_slot(), tr)
        if self.queue[0] is tr:
            tr.start_us = now_us
            tr.completion_us = now_us + transfer_us(nbytes, self.bandwidth)
        self._retime()
        return tr

    def promote(self, ident: Ident, now_us: int) -> Transfer:
        """Move a pending prefetch of `ident` up to demand priority."""
        idx = next(i for i, tr in enumerate(self.queue) if tr.ident == ident)
        tr = self.queue[idx]
        tr.promoted = True
        if idx > 0:
            self.queue.pop(idx)
            self.queue.insert(self._demand_slot(), tr)
            self._retime()
        return tr

    def in_flight(self, ident: Ident) -> Transfer | None:
        for tr in self.queue:
            if tr.ident == ident:
                return tr
        return None

    def pop_completed(self, now_us: int) -> list[Transfer]:
        done: list[Transfer] = []
        while self.queue and self.queue[0].completion_us <= now_us:
            done.append(self.queue.pop(0))
        return done

    def cancel_newest_pending_prefetch(self) -> Transfer | None:
        """Remove the most recently queued prefetch that has not started.

        Promoted entries are demand-claimed and never cancelled; the head
        entry is in flight and never cancelled.
        """
        for i in range(len(self.queue) - 1, 0, -1):
            tr = self.queue[i]
            if tr.kind == PREFETCH and not tr.promoted:
                self.queue.pop(i)
                self._retime()
                return tr
        return None

    def next_completion_us(self) -> int | None:
        return self.queue[0].completion_us if self.queue else None


@dataclass
class _UniqueDemand:
    expert: int
    rank: int                  # best (lowest) per-row rank, 1-based
    gate_score: float          # highest original-softmax weight across rows
    summed_weight: float       # total routing weight across rows
    tokens: int


class Simulation:
    """One deterministic run of a config over a trace."""

    def __init__(self, config: SimConfig, trace: Trace) -> None:
        if (
            trace.spec.num_layers != config.model.num_layers
            or trace.spec.experts_per_layer != config.model.experts_per_layer
            or trace.spec.top_k != config.model.top_k
        ):
            raise ConfigError(
                f"trace geometry (L={trace.spec.num_layers}, "
                f"E={trace.spec.experts_per_layer}, k={trace.spec.top_k}) does not "
                f"match the model (L={config.model.num_layers}, "
                f"E={config.model.experts_per_layer}, k={config.model.top_k})"
            )
        self.cfg = config
        self.trace = trace
        self.spec = config.model
        self.capacity = config.capacity_bytes()
        self.cache = CacheState(self.capacity)
        self.channel = Channel(config.hardware.bandwidth_bytes_per_sec)
        self.policy = make_eviction_policy(
            config.eviction,
            config.model.num_layers,
            config.model.highest_precision,
            config.sb_decay,
        )
        self.queue = PrefetchQueue()
        self.history = ResidencyHistory()
        self.delta = DeltaAvgState()
        self.miss_cfg = config.miss_config()
        self.rng = np.random.default_rng(config.seed)
        self.log: list = []
        self.now = 0
        self._bytes_in_flight: dict[Ident, int] = {}
        self._pass_id = 0
        self._layer = 0

    # -- channel settlement -------------------------------------------

    def _settle(self) -> None:
        """Admit every transfer whose completion time has passed."""
        for tr in self.channel.pop_completed(self.now):
            self.cache.unreserve(tr.nbytes)
            self._bytes_in_flight.pop(tr.ident, None)
            self.cache.admit(tr.ident, tr.precision, tr.nbytes, tr.score)
            ctx = AccessContext(self._layer, self._pass_id, None, tr.precision)
            self.policy.note_admit(tr.ident, ctx)
            self.history.note_admit(tr.ident)
            if tr.kind == PREFETCH:
                self.log.append(
                    PrefetchRec(
                        "completed",
                        self._pass_id,
                        self._layer,
                        tr.ident[0],
                        tr.ident[1],
                        tr.completion_us,
                        tr.score,
                    )
                )

    def _advance_to(self, time_us: int) -> None:
        assert time_us >= self.now, "clock must not run backwards"
        self.now = time_us
        self._settle()

    # -- eviction ------------------------------------------------------

    def _evict(self, victim: Ident, cause: str, forced: bool) -> None:
        precision, _ = self.cache.evict(victim)
        self.history.note_evict(victim, self._pass_id)
        self.log.append(
            EvictRec(
                self._pass_id, self._layer, victim[0], victim[1], precision,
                cause, forced,
            )
        )

    # -- demand path ---------------------------------------------------

    def _fetch(self, ident: Ident, gate_score: float, precision: str, final: bool):
        """Make space and run one demand transfer; returns blocked_us.

        Non-final (cascade probe) calls return None instead of forcing
        current-pass evictions. As a last resort on final calls, pending
        prefetch reservations are cancelled newest-first; if space still
        cannot be found the engine waits for the active transfer.
        """
        nbytes = self.spec.expert_bytes(precision)
        if nbytes > self.capacity:
            if not final:
                return None
            raise ConfigError(
                f"{precision} expert ({nbytes} B) exceeds capacity {self.capacity} B"
            )
        ctx = AccessContext(self._layer, self._pass_id, gate_score, precision)
        while self.cache.free_bytes < nbytes:
            victim = self.policy.select_victim(ctx, forced=final)
            if victim is not None:
                self._evict(victim, DEMAND, final)
                continue
            if not final:
                return None
            cancelled = self.channel.cancel_newest_pending_prefetch()
            if cancelled is not None:
                self.cache.unreserve(cancelled.nbytes)
                self._bytes_in_flight.pop(cancelled.ident, None)
                self.log.append(
                    PrefetchRec(
                        "dropped", self._pass_id, self._layer,
                        cancelled.ident[0], cancelled.ident[1], self.now,
                        cancelled.score, "superseded",
                    )
                )
                continue
            next_done = self.channel.next_completion_us()
            if next_done is None:
                raise RuntimeError(
                    "nothing left to evict and nothing in flight; capacity "
                    "accounting is inconsistent"
                )
            self._advance_to(max(next_done, self.now))
        self.cache.reserve(nbytes)
        self._bytes_in_flight[ident] = nbytes
        tr = self.channel.insert_demand(ident, nbytes, self.now, gate_score, precision)
        blocked = tr.completion_us - self.now
        self._advance_to(tr.completion_us)
        return blocked

    def _handle_demand(self, d: _UniqueDemand, layer_scores: list[float]) -> AccessRec:
        ident = (self._layer, d.expert)
        if self.cache.is_resident(ident):
            precision = self.cache.precision_of(ident)
            ctx = AccessContext(self._layer, self._pass_id, d.gate_score, precision)
            self.policy.note_access(ident, ctx)
            self.cache.recorded_score[ident] = d.gate_score
            return AccessRec(
                self._pass_id, self._layer, d.expert, d.tokens, d.rank,
                HIT, None, 0, 0.0, precision,
            )

        miss_class = classify_miss(ident, self._pass_id, self.history)

        in_flight = self.channel.in_flight(ident)
        if in_flight is not None:
            tr = self.channel.promote(ident, self.now)
            blocked = tr.completion_us - self.now
            self._advance_to(tr.completion_us)
            ctx = AccessContext(self._layer, self._pass_id, d.gate_score, tr.precision)
            self.policy.note_access(ident, ctx)
            self.cache.recorded_score[ident] = d.gate_score
            return AccessRec(
                self._pass_id, self._layer, d.expert, d.tokens, d.rank,
                MISS_WAIT, miss_class, blocked, 0.0, tr.precision,
            )

        outcome = resolve_miss(
            self.miss_cfg,
            self.spec,
            self.cfg.working_precision,
            d.rank,
            d.gate_score,
            d.summed_weight,
            layer_scores,
            self.cache.layer_residents(self._layer),
            lambda precision, final: self._fetch(ident, d.gate_score, precision, final),
        )
        if outcome.kind == FETCHED:
            ctx = AccessContext(
                self._layer, self._pass_id, d.gate_score, outcome.precision
            )
            self.policy.note_access(ident, ctx)
            self.cache.recorded_score[ident] = d.gate_score
            return AccessRec(
                self._pass_id, self._layer, d.expert, d.tokens, d.rank,
                MISS_FETCH, miss_class, outcome.blocked_us, 0.0, outcome.precision,
            )
        if outcome.kind == DROPPED:
            return AccessRec(
                self._pass_id, self._layer, d.expert, d.tokens, d.rank,
                DROP_OUTCOME, None, 0, outcome.weight_delta, None,
            )
        assert outcome.kind == SUBSTITUTED
        sub_ident = (self._layer, outcome.substitute)
        sub_precision = self.cache.precision_of(sub_ident)
        ctx = AccessContext(self._layer, self._pass_id, None, sub_precision)
        self.policy.note_access(sub_ident, ctx)
        return AccessRec(
            self._pass_id, self._layer, d.expert, d.tokens, d.rank,
            SUBST_OUTCOME, None, 0, outcome.weight_delta, sub_precision,
            substitute=outcome.substitute,
        )

    # -- per-layer phases ------------------------------------------------

    @staticmethod
    def _aggregate_demand(decisions) -> list[_UniqueDemand]:
        """Collapse per-row selections into one demand per unique expert,
        ordered by best per-row rank, then higher gate score, then index."""
        agg: dict[int, _UniqueDemand] = {}
        for decision in decisions:
            for pos, expert in enumerate(decision.selected):
                weight = decision.weights[pos]
                d = agg.get(expert)
                if d is None:
                    agg[expert] = _UniqueDemand(expert, pos + 1, weight, weight, 1)
                else:
                    d.rank = min(d.rank, pos + 1)
                    d.gate_score = max(d.gate_score, weight)
                    d.summed_weight += weight
                    d.tokens += 1
        return sorted(agg.values(), key=lambda d: (d.rank, -d.gate_score, d.expert))

    def _run_layer(self, event) -> int:
        self._layer = event.layer
        self._settle()

        cached = self.cache.experts_in_layer(event.layer)
        decisions = route_event(
            event.logits,
            self.spec.top_k,
            self.cfg.routing,
            self.cfg.lam,
            cached,
            self.delta,
            event.layer,
        )

        demands = self._aggregate_demand(decisions)
        layer_scores = [d.gate_score for d in demands]

        blocked = 0
        affected: set[int] = set()
        weight_delta = 0.0
        for d in demands:
            rec = self._handle_demand(d, layer_scores)
            self.log.append(rec)
            blocked += rec.blocked_us
            weight_delta += rec.weight_delta
            if rec.outcome in (DROP_OUTCOME, SUBST_OUTCOME):
                affected.add(d.expert)

        faithful = sum(
            1
            for dec in decisions
            if not dec.modified and not affected.intersection(dec.selected)
        )
        selected_mass = sum(sum(dec.weights) for dec in decisions)
        original_mass = sum(sum(dec.original_weights) for dec in decisions)
        self.log.append(
            RouteRec(
                self._pass_id,
                event.layer,
                len(decisions),
                faithful,
                sum(1 for dec in decisions if dec.modified),
                selected_mass,
                original_mass,
                selected_mass + weight_delta,
            )
        )

        if self.cfg.prefetch != NONE and event.layer + 1 < self.spec.num_layers:
            self._submit_prefetches(event.layer)

        self._advance_to(self.now + self.cfg.hardware.per_layer_compute_us)
        return blocked

    def _submit_prefetches(self, layer: int) -> None:
        target = layer + 1
        next_logits = self.trace.passes[self._pass_id].events[target].logits
        predictions, clamped = predict_event(
            next_logits,
            self.spec.top_k,
            self.cfg.prefetch,
            self.cfg.overfetch,
            self.cfg.percentile,
        )
        predictions = apply_prediction_noise(
            predictions,
            self.spec.experts_per_layer,
            self.cfg.prefetch_noise,
            self.rng,
        )
        self.log.append(
            PredictionRec(
                self._pass_id,
                layer,
                target,
                tuple(e for e, _ in predictions),
                clamped,
            )
        )
        for expert, score in predictions:
            self.queue.submit(PrefetchRequest(target, expert, score, self.now))
            self.log.append(
                PrefetchRec(
                    "submitted", self._pass_id, layer, target, expert, self.now, score
                )
            )

        nbytes = self.spec.expert_bytes(self.cfg.working_precision)
        ctx = AccessContext(layer, self._pass_id, None, self.cfg.working_precision)

        def on_start(req: PrefetchRequest) -> None:
            self._bytes_in_flight[(req.target_layer, req.expert)] = nbytes
            self.log.append(
                PrefetchRec(
                    "started", self._pass_id, layer, req.target_layer, req.expert,
                    self.now, req.score,
                )
            )

        def on_skip(req: PrefetchRequest, reason: str) -> None:
            self.log.append(
                PrefetchRec(
                    "skipped", self._pass_id, layer, req.target_layer, req.expert,
                    self.now, req.score, reason,
                )
            )

        def on_drop(req: PrefetchRequest, reason: str) -> None:
            self.log.append(
                PrefetchRec(
                    "dropped", self._pass_id, layer, req.target_layer, req.expert,
                    self.now, req.score, reason,
                )
            )

        watchdog_step(
            self.queue,
            self.cache,
            self.policy,
            self.channel,
            self.now,
            ctx,
            nbytes,
            self.cfg.working_precision,
            lambda victim, cause, forced: self._evict(victim, cause, forced),
            on_start,
            on_skip,
            on_drop,
        )

    # -- top level -------------------------------------------------------

    def run(self) -> dict:
        for fwd in self.trace.passes:
            self._pass_id = fwd.pass_id
            self.policy.begin_pass(fwd.pass_id)
            start = self.now
            blocked = 0
            for event in fwd.events:
                blocked += self._run_layer(event)
            self.log.append(
                PassRec(
                    fwd.pass_id, fwd.kind, fwd.events[0].tokens, start, self.now,
                    blocked,
                )
            )
        return build_report(
            self.cfg.echo(),
            self.spec.num_layers,
            self.cfg.hardware.per_layer_compute_us,
            self.log,
        )


def run_simulation(config: SimConfig, trace: Trace) -> dict:
    """Run one config over one trace and return the report dict."""
    return Simulation(config, trace).run()
