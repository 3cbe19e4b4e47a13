"""Demand-miss handling policies.

A miss can be resolved by fetching (at the working precision, the lowest
precision, or down a precision ladder), by dropping the expert from the
token's mix, or by substituting a similarly-scored resident expert from
the same layer. The mechanics of eviction and the transfer channel stay in
the engine; this module owns only the policy decision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .models import ConfigError, ModelSpec
from .prefetch import nearest_rank_percentile

FETCH = "fetch"
FETCH_LOW = "fetch_low"
FETCH_PRIORITY = "fetch_priority"
DROP = "drop"
SUBST = "subst"

MISS_NAMES = (FETCH, FETCH_LOW, FETCH_PRIORITY, DROP, SUBST)

# Outcome kinds
FETCHED = "fetch"
DROPPED = "drop"
SUBSTITUTED = "subst"


@dataclass(frozen=True)
class MissConfig:
    policy: str = FETCH
    drop_rank_threshold: int = 2
    subst_tolerance: float = 0.05
    degrade_percentile: float = 60.0

    def __post_init__(self) -> None:
        if self.policy not in MISS_NAMES:
            raise ConfigError(
                f"unknown miss policy {self.policy!r}; expected one of {', '.join(MISS_NAMES)}"
            )
        if self.drop_rank_threshold < 1:
            raise ConfigError("drop_rank_threshold must be >= 1")
        if self.subst_tolerance < 0:
            raise ConfigError("subst_tolerance must be >= 0")
        if not (0.0 <= self.degrade_percentile < 100.0):
            raise ConfigError("degrade_percentile must be in [0, 100)")


@dataclass
class MissOutcome:
    kind: str                      # FETCHED | DROPPED | SUBSTITUTED
    blocked_us: int = 0
    weight_delta: float = 0.0
    precision: str | None = None   # precision fetched (FETCHED only)
    substitute: int | None = None  # expert index executed instead (SUBSTITUTED only)


# fetch_fn(precision, final) -> blocked_us, or None when space could not be
# made without forcing and final is False.
FetchFn = Callable[[str, bool], int | None]


def find_substitute(
    layer_residents: list[tuple[int, float]], gate_score: float, tolerance: float
) -> int | None:
    """Pick the same-layer resident whose recorded score is nearest gate_score.

    Only candidates within `tolerance` qualify; ties break to the lower
    expert index. Returns the expert index or None.
    """
    best: tuple[float, int] | None = None
    for expert, recorded in layer_residents:
        diff = abs(recorded - gate_score)
        if diff <= tolerance and (best is None or (diff, expert) < best):
            best = (diff, expert)
    return best[1] if best else None


def resolve_miss(
    cfg: MissConfig,
    spec: ModelSpec,
    working_precision: str,
    rank: int,
    gate_score: float,
    summed_weight: float,
    layer_scores: list[float],
    layer_residents: list[tuple[int, float]],
    fetch_fn: FetchFn,
) -> MissOutcome:
    """Resolve one demand miss.

    Args:
        cfg: Miss policy configuration.
        spec: Model geometry (for the precision ladder and byte sizes).
        working_precision: Default fetch precision.
        rank: 1-based rank of the missing expert by routing weight.
        gate_score: The missing expert's gate score for this event.
        summed_weight: Total routing weight the expert carries across rows.
        layer_scores: Gate scores of every expert demanded at this layer
            event; the degradation percentile is computed over these.
        layer_residents: (expert, recorded_score) pairs resident in the
            missing expert's layer, for substitution.
        fetch_fn: Engine callback that makes space, schedules the transfer,
            and blocks until it lands.

    Returns:
        MissOutcome describing what happened and the time spent blocked.
    """
    if cfg.policy == DROP and rank > cfg.drop_rank_threshold:
        return MissOutcome(DROPPED, weight_delta=-summed_weight)

    if cfg.policy == SUBST:
        sub = find_substitute(layer_residents, gate_score, cfg.subst_tolerance)
        if sub is not None:
            return MissOutcome(SUBSTITUTED, weight_delta=-summed_weight, substitute=sub)

    if cfg.policy == FETCH_LOW:
        blocked = fetch_fn(spec.lowest_precision, True)
        return MissOutcome(FETCHED, blocked, precision=spec.lowest_precision)

    if cfg.policy == FETCH_PRIORITY:
        ladder = spec.precisions
        start = 0
        if len(ladder) > 1 and layer_scores:
            threshold = nearest_rank_percentile(layer_scores, cfg.degrade_percentile)
            if gate_score < threshold:
                start = 1  # low-importance expert: one level lower outright
        for i in range(start, len(ladder)):
            final = i == len(ladder) - 1
            blocked = fetch_fn(ladder[i], final)
            if blocked is not None:
                return MissOutcome(FETCHED, blocked, precision=ladder[i])
        raise RuntimeError("fetch cascade exhausted without a forced level")

    # FETCH, or the fetch fallback of DROP / SUBST
    blocked = fetch_fn(working_precision, True)
    return MissOutcome(FETCHED, blocked, precision=working_precision)
