"""Engine timeline semantics: the transfer channel, a hand-checked
two-layer walkthrough under four eviction policies, and run-level
invariants (determinism, capacity safety, timing identities)."""

import json

import numpy as np
import pytest

from expertsim.engine import Channel, SimConfig, Simulation, run_simulation
from expertsim.metrics import (
    AccessRec,
    EvictRec,
    PassRec,
    PredictionRec,
    build_report,
    check_identities,
)
from expertsim.models import GB, ConfigError, HardwareSpec, ModelSpec
from expertsim.trace import ForwardPass, LayerEvent, Trace, generate_synthetic

TINY = ModelSpec("tiny", num_layers=2, experts_per_layer=4, top_k=1,
                 expert_bytes_fp16=1_000_000)
MINI = ModelSpec("mini", num_layers=4, experts_per_layer=8, top_k=2,
                 expert_bytes_fp16=100_000)


def make_trace(spec, rows_per_pass):
    """Build a trace from explicit logits rows: one list of per-layer
    (tokens x experts) matrices per pass; pass 0 is the prefill."""
    passes = []
    for pass_id, layer_rows in enumerate(rows_per_pass):
        kind = "prefill" if pass_id == 0 else "decode"
        events = [
            LayerEvent(pass_id, kind, layer,
                       np.asarray(rows, np.float32).reshape(-1, spec.experts_per_layer))
            for layer, rows in enumerate(layer_rows)
        ]
        passes.append(ForwardPass(pass_id, kind, events))
    trace = Trace(spec, passes)
    trace.validate()
    return trace


# --- channel -------------------------------------------------------------

def test_channel_serializes_transfers():
    ch = Channel(5 * GB)
    a = ch.append((1, 0), 12_000_000, "prefetch", 0, 0.5, "fp16")
    b = ch.append((1, 1), 12_000_000, "prefetch", 0, 0.4, "fp16")
    assert (a.start_us, a.completion_us) == (0, 2400)
    assert (b.start_us, b.completion_us) == (2400, 4800)


def test_channel_demand_jumps_pending_prefetches():
    ch = Channel(1 * GB)
    ch.append((1, 0), 1_000_000, "prefetch", 0, 0.5, "fp16")   # active
    late = ch.append((1, 1), 1_000_000, "prefetch", 0, 0.4, "fp16")
    dem = ch.insert_demand((0, 3), 1_000_000, 500, 0.9, "fp16")
    assert [tr.ident for tr in ch.queue] == [(1, 0), (0, 3), (1, 1)]
    assert ch.queue[0].start_us == 0               # head never retimed
    assert dem.start_us == 1000 and dem.completion_us == 2000
    assert late.start_us == 2000                   # pushed behind the demand


def test_channel_demand_into_empty_queue_starts_now():
    ch = Channel(1 * GB)
    dem = ch.insert_demand((0, 1), 2_000_000, 700, 0.9, "fp16")
    assert dem.start_us == 700 and dem.completion_us == 2700


def test_channel_promote_moves_prefetch_to_demand_slot():
    ch = Channel(1 * GB)
    ch.append((0, 0), 1_000_000, "demand", 0, 0.9, "fp16")
    ch.append((1, 1), 1_000_000, "prefetch", 0, 0.4, "fp16")
    wanted = ch.append((1, 2), 1_000_000, "prefetch", 0, 0.3, "fp16")
    tr = ch.promote((1, 2), 500)
    assert tr is wanted and tr.promoted
    assert [t.ident for t in ch.queue] == [(0, 0), (1, 2), (1, 1)]
    assert tr.completion_us == 2000


def test_channel_promote_head_stays_put():
    ch = Channel(1 * GB)
    ch.append((1, 0), 1_000_000, "prefetch", 0, 0.4, "fp16")
    tr = ch.promote((1, 0), 100)
    assert tr.promoted and ch.queue[0] is tr
    assert tr.start_us == 0


def test_channel_cancel_skips_head_and_promoted():
    ch = Channel(1 * GB)
    ch.append((1, 0), 1_000_000, "prefetch", 0, 0.5, "fp16")
    ch.append((1, 1), 1_000_000, "prefetch", 0, 0.4, "fp16")
    ch.append((1, 2), 1_000_000, "prefetch", 0, 0.3, "fp16")
    ch.promote((1, 1), 0)
    cancelled = ch.cancel_newest_pending_prefetch()
    assert cancelled.ident == (1, 2)
    assert ch.cancel_newest_pending_prefetch() is None
    assert [t.ident for t in ch.queue] == [(1, 0), (1, 1)]


def test_channel_pop_completed_up_to_now():
    ch = Channel(1 * GB)
    ch.append((0, 0), 1_000_000, "prefetch", 0, 0.5, "fp16")
    ch.append((0, 1), 1_000_000, "prefetch", 0, 0.5, "fp16")
    assert [t.ident for t in ch.pop_completed(1000)] == [(0, 0)]
    assert ch.next_completion_us() == 2000
    assert [t.ident for t in ch.pop_completed(5000)] == [(0, 1)]
    assert ch.next_completion_us() is None


# --- hand-checked walkthrough ---------------------------------------------
#
# Two layers, four experts, top-1, one expert per megabyte, room for two.
# Transfers take 1000 us, compute 2000 us per layer. The demand string is
#   pass0: (0,0) (1,1)   pass1: (0,2) (1,1)   pass2: (0,0) (1,3)
# so policies differ on what they sacrifice for (0,2) and afterwards.

HAND_ROWS = [
    [[3.0, 0, 0, 0], [0, 2.0, 0, 0]],
    [[0, 0, 4.0, 0], [0, 1.5, 0, 0]],
    [[2.5, 0, 0, 0], [0, 0, 0, 3.5]],
]

HAND_EXPECT = {
    "lru": {
        "victims": [(0, 0), (0, 2), (1, 1)],
        "ends": [6000, 11000, 17000],
        "hits": 1,
        "misses": (4, 0, 1),   # compulsory, collision, capacity
    },
    "ls": {
        "victims": [(0, 0), (0, 2), (1, 1)],
        "ends": [6000, 11000, 17000],
        "hits": 1,
        "misses": (4, 0, 1),
    },
    "fld": {
        "victims": [(1, 1), (0, 0), (1, 1), (0, 0)],
        "ends": [6000, 12000, 18000],
        "hits": 0,
        "misses": (4, 1, 1),
    },
    "sb": {
        "victims": [(1, 1), (0, 0), (1, 1), (0, 0)],
        "ends": [6000, 12000, 18000],
        "hits": 0,
        "misses": (4, 1, 1),
    },
}


def hand_config(eviction):
    return SimConfig(
        model=TINY,
        hardware=HardwareSpec(capacity_bytes=2_000_000,
                              bandwidth_bytes_per_sec=1 * GB,
                              per_layer_compute_us=2000),
        working_precision="fp16",
        eviction=eviction,
        sb_decay=0.9,
    )


@pytest.mark.parametrize("eviction", sorted(HAND_EXPECT))
def test_hand_walkthrough(eviction):
    expect = HAND_EXPECT[eviction]
    sim = Simulation(hand_config(eviction), make_trace(TINY, HAND_ROWS))
    report = sim.run()

    victims = [(r.victim_layer, r.victim_expert)
               for r in sim.log if isinstance(r, EvictRec)]
    assert victims == expect["victims"]

    ends = [r.end_us for r in sim.log if isinstance(r, PassRec)]
    assert ends == expect["ends"]

    totals = report["totals"]
    comp, coll, cap = expect["misses"]
    assert totals["demanded"] == 6
    assert totals["hits"] == expect["hits"]
    assert totals["misses"] == comp + coll + cap
    assert totals["compulsory_misses"] == comp
    assert totals["collision_misses"] == coll
    assert totals["capacity_misses"] == cap
    assert report["timing"]["ttft_us"] == expect["ends"][0]
    assert report["timing"]["total_us"] == expect["ends"][-1]


def test_hand_walkthrough_collision_is_same_pass_reeviction():
    # fld throws out (1,1) to serve layer 0 of pass 1 and pays for it one
    # layer later in the same pass; that miss must classify as collision.
    sim = Simulation(hand_config("fld"), make_trace(TINY, HAND_ROWS))
    sim.run()
    wait_or_fetch = [r for r in sim.log if isinstance(r, AccessRec)
                     and r.miss_class == "collision"]
    assert len(wait_or_fetch) == 1
    rec = wait_or_fetch[0]
    assert (rec.pass_id, rec.layer, rec.expert) == (1, 1, 1)


# --- run-level invariants --------------------------------------------------

def mini_config(**over):
    base = dict(
        model=MINI,
        hardware=HardwareSpec(capacity_bytes=500_000,
                              bandwidth_bytes_per_sec=1 * GB,
                              per_layer_compute_us=100),
        working_precision="fp16",
        eviction="ls",
        prefetch="topk",
        overfetch=1.5,
        prefetch_noise=0.3,
        routing="cache_aware",
        lam=0.5,
        seed=11,
    )
    base.update(over)
    return SimConfig(**base)


def mini_trace(seed=5):
    return generate_synthetic(MINI, seed=seed, prefill_tokens=4,
                              decode_tokens=6, affinity=0.6, skew=1.0)


def test_runs_are_deterministic():
    cfg, trace = mini_config(), mini_trace()
    a = run_simulation(cfg, trace)
    b = run_simulation(cfg, trace)
    assert json.dumps(a) == json.dumps(b)


def test_report_rebuilds_from_the_log():
    cfg, trace = mini_config(), mini_trace()
    sim = Simulation(cfg, trace)
    report = sim.run()
    replay = build_report(cfg.echo(), MINI.num_layers,
                          cfg.hardware.per_layer_compute_us, sim.log)
    assert json.dumps(report) == json.dumps(replay)


def test_capacity_invariant_holds_after_a_tight_run():
    cfg, trace = mini_config(hardware=HardwareSpec(
        capacity_bytes=100_000, bandwidth_bytes_per_sec=1 * GB,
        per_layer_compute_us=100)), mini_trace()
    sim = Simulation(cfg, trace)
    report = sim.run()
    assert sim.cache.resident_bytes + sim.cache.reserved_bytes <= 100_000
    check_identities(report)


def test_identities_hold_across_miss_policies():
    trace = mini_trace()
    for miss in ("fetch", "fetch_low", "fetch_priority", "drop", "subst"):
        report = run_simulation(mini_config(miss=miss, eviction="lru"), trace)
        check_identities(report)


def test_sync_overhead_accounts_for_all_stall_time():
    # without prefetch the only stalls are demand transfers, so wall time
    # decomposes exactly into compute plus sync overhead
    cfg = mini_config(prefetch="none", prefetch_noise=0.0, routing="standard")
    trace = mini_trace()
    report = run_simulation(cfg, trace)
    timing = report["timing"]
    compute = trace.num_passes * MINI.num_layers * 100
    assert timing["total_us"] == compute + timing["sync_overhead_us"]


def test_infinite_bandwidth_zero_stalls():
    cfg = mini_config(hardware=HardwareSpec(
        capacity_bytes=500_000, bandwidth_bytes_per_sec=0,
        per_layer_compute_us=100), prefetch="none")
    report = run_simulation(cfg, mini_trace())
    assert report["timing"]["sync_overhead_us"] == 0
    assert report["totals"]["misses"] > 0  # still misses, they are just free


def test_prefetch_never_targets_layer_zero_or_past_the_end():
    sim = Simulation(mini_config(), mini_trace())
    sim.run()
    preds = [r for r in sim.log if isinstance(r, PredictionRec)]
    assert preds, "expected predictions from a topk run"
    assert all(1 <= p.target_layer < MINI.num_layers for p in preds)
    assert all(p.layer == p.target_layer - 1 for p in preds)


def test_trace_geometry_must_match_the_model():
    other = ModelSpec("other", 3, 8, 2, 100_000)
    with pytest.raises(ConfigError, match="geometry"):
        Simulation(mini_config(model=other), mini_trace())


def test_model_precisions_may_differ_from_the_trace():
    # the trace carries routing only; a precision-restricted variant of the
    # same geometry is a valid model to simulate under
    variant = ModelSpec("mini8", 4, 8, 2, 100_000,
                        precisions=("int8", "int4", "int2"))
    cfg = mini_config(model=variant, working_precision="int8")
    report = run_simulation(cfg, mini_trace())
    assert report["config"]["working_precision"] == "int8"


def test_config_validation():
    with pytest.raises(ConfigError, match="working precision"):
        SimConfig(model=ModelSpec("m", 2, 4, 1, 1000, precisions=("fp16",)),
                  working_precision="int4")
    with pytest.raises(ConfigError, match="eviction"):
        mini_config(eviction="belady")
    with pytest.raises(ConfigError, match="overfetch"):
        mini_config(overfetch=0.0)
    with pytest.raises(ConfigError, match="prefetch_noise"):
        mini_config(prefetch_noise=1.5)
    with pytest.raises(ConfigError, match="cannot hold"):
        mini_config(hardware=HardwareSpec(capacity_bytes=10_000))
    with pytest.warns(UserWarning, match="lhu"):
        mini_config(eviction="lhu", miss="fetch")


def test_echo_round_trips_through_json():
    cfg = mini_config()
    echo = cfg.echo()
    assert json.loads(json.dumps(echo)) == echo
    assert echo["hardware"]["resolved_capacity_bytes"] == 500_000
    assert echo["lambda"] == 0.5
