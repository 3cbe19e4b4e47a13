"""Miss policy decisions: drop, substitute, and the fetch variants."""

import pytest

from expertsim.miss import (
    DROP,
    DROPPED,
    FETCH,
    FETCH_LOW,
    FETCH_PRIORITY,
    FETCHED,
    SUBST,
    SUBSTITUTED,
    MissConfig,
    find_substitute,
    resolve_miss,
)
from expertsim.models import ConfigError, ModelSpec

TINY = ModelSpec("tiny", num_layers=2, experts_per_layer=4, top_k=1,
                 expert_bytes_fp16=1_000_000)


class FetchRecorder:
    """fetch_fn stub that logs calls and replays a scripted result list."""

    def __init__(self, plan=None, blocked=600):
        self.calls = []
        self.plan = list(plan) if plan is not None else None
        self.blocked = blocked

    def __call__(self, precision, final):
        self.calls.append((precision, final))
        if self.plan is not None:
            return self.plan.pop(0)
        return self.blocked


def resolve(cfg, *, rank=1, gate=0.5, weight=0.5, layer_scores=(),
            residents=(), fetch=None):
    fetch = fetch if fetch is not None else FetchRecorder()
    out = resolve_miss(cfg, TINY, "int4", rank, gate, weight,
                       list(layer_scores), list(residents), fetch)
    return out, fetch


def test_config_validation():
    with pytest.raises(ConfigError, match="unknown miss policy"):
        MissConfig(policy="retry")
    with pytest.raises(ConfigError):
        MissConfig(drop_rank_threshold=0)
    with pytest.raises(ConfigError):
        MissConfig(subst_tolerance=-0.01)
    with pytest.raises(ConfigError):
        MissConfig(degrade_percentile=100.0)


def test_find_substitute_prefers_nearest_then_lower_index():
    residents = [(3, 0.30), (1, 0.52), (2, 0.48)]
    # experts 1 and 2 are both 0.02 away: the tie goes to the lower index
    assert find_substitute(residents, 0.50, 0.05) == 1
    assert find_substitute(residents, 0.50, 0.2) == 1
    assert find_substitute(residents, 0.31, 0.05) == 3
    assert find_substitute(residents, 0.9, 0.05) is None
    assert find_substitute([], 0.5, 1.0) is None


def test_fetch_goes_to_working_precision():
    out, fetch = resolve(MissConfig(FETCH))
    assert out.kind == FETCHED
    assert out.precision == "int4"
    assert out.blocked_us == 600
    assert fetch.calls == [("int4", True)]


def test_drop_beyond_rank_threshold():
    out, fetch = resolve(MissConfig(DROP, drop_rank_threshold=2),
                         rank=3, weight=0.12)
    assert out.kind == DROPPED
    assert out.weight_delta == pytest.approx(-0.12)
    assert fetch.calls == []


def test_drop_within_threshold_fetches_instead():
    out, fetch = resolve(MissConfig(DROP, drop_rank_threshold=2), rank=2)
    assert out.kind == FETCHED
    assert fetch.calls == [("int4", True)]


def test_subst_uses_resident_within_tolerance():
    out, fetch = resolve(MissConfig(SUBST, subst_tolerance=0.05),
                         gate=0.50, weight=0.5,
                         residents=[(2, 0.47), (0, 0.10)])
    assert out.kind == SUBSTITUTED
    assert out.substitute == 2
    assert out.weight_delta == pytest.approx(-0.5)
    assert fetch.calls == []


def test_subst_falls_back_to_fetch_when_nothing_matches():
    out, fetch = resolve(MissConfig(SUBST, subst_tolerance=0.01),
                         gate=0.50, residents=[(2, 0.10)])
    assert out.kind == FETCHED
    assert out.precision == "int4"
    assert fetch.calls == [("int4", True)]


def test_fetch_low_uses_the_lowest_rung():
    out, fetch = resolve(MissConfig(FETCH_LOW))
    assert out.kind == FETCHED
    assert out.precision == "int2"
    assert fetch.calls == [("int2", True)]


def test_fetch_priority_walks_down_until_space_is_found():
    fetch = FetchRecorder(plan=[None, None, None, 150])
    out, fetch = resolve(MissConfig(FETCH_PRIORITY), gate=0.4,
                         layer_scores=[0.4, 0.3, 0.15, 0.1, 0.05],
                         fetch=fetch)
    assert out.kind == FETCHED
    assert out.precision == "int2"
    assert out.blocked_us == 150
    assert fetch.calls == [("fp16", False), ("int8", False),
                           ("int4", False), ("int2", True)]


def test_fetch_priority_takes_the_first_rung_with_space():
    fetch = FetchRecorder(plan=[900])
    out, fetch = resolve(MissConfig(FETCH_PRIORITY), gate=0.4,
                         layer_scores=[0.4, 0.1], fetch=fetch)
    assert out.precision == "fp16"
    assert fetch.calls == [("fp16", False)]


def test_fetch_priority_degrades_low_importance_experts():
    # p60 of these five scores by nearest rank is 0.15; a 0.1 gate sits
    # below it, so the cascade starts one rung down.
    fetch = FetchRecorder(plan=[700])
    out, fetch = resolve(MissConfig(FETCH_PRIORITY, degrade_percentile=60.0),
                         gate=0.1, layer_scores=[0.4, 0.3, 0.15, 0.1, 0.05],
                         fetch=fetch)
    assert out.precision == "int8"
    assert fetch.calls[0] == ("int8", False)


def test_fetch_priority_at_threshold_is_not_degraded():
    fetch = FetchRecorder(plan=[700])
    out, fetch = resolve(MissConfig(FETCH_PRIORITY, degrade_percentile=60.0),
                         gate=0.15, layer_scores=[0.4, 0.3, 0.15, 0.1, 0.05],
                         fetch=fetch)
    assert out.precision == "fp16"


def test_fetch_priority_without_scores_starts_at_the_top():
    fetch = FetchRecorder(plan=[500])
    out, fetch = resolve(MissConfig(FETCH_PRIORITY), layer_scores=[],
                         fetch=fetch)
    assert out.precision == "fp16"


def test_fetch_priority_single_rung_ladder_is_final_immediately():
    spec = ModelSpec("flat", 2, 4, 1, 1_000_000, precisions=("fp16",))
    fetch = FetchRecorder(plan=[300])
    out = resolve_miss(MissConfig(FETCH_PRIORITY), spec, "fp16", 1, 0.1,
                       0.1, [0.9, 0.1], [], fetch)
    assert out.precision == "fp16"
    assert fetch.calls == [("fp16", True)]


def test_fetch_priority_guards_against_a_refusing_final_rung():
    fetch = FetchRecorder(plan=[None, None, None, None])
    with pytest.raises(RuntimeError, match="cascade"):
        resolve(MissConfig(FETCH_PRIORITY), layer_scores=[], fetch=fetch)
