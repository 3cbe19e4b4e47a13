"""Prediction modes, prediction noise, and the transfer watchdog."""

import numpy as np
import pytest

from expertsim.engine import CacheState, Channel
from expertsim.eviction import AccessContext, LRUPolicy, LSPolicy
from expertsim.models import ConfigError
from expertsim.prefetch import (
    ORACLE,
    PrefetchQueue,
    PrefetchRequest,
    SCORE,
    TOPK,
    apply_prediction_noise,
    nearest_rank_percentile,
    predict_event,
    predict_score_percentile,
    predict_topk,
    watchdog_step,
)
from expertsim.routing import softmax_rows, topk_indices

SCORES = np.array([0.4, 0.3, 0.15, 0.1, 0.05])


def test_nearest_rank_percentile():
    assert nearest_rank_percentile(SCORES, 80.0) == pytest.approx(0.3)
    assert nearest_rank_percentile(SCORES, 0.0) == pytest.approx(0.05)
    assert nearest_rank_percentile(SCORES, 99.0) == pytest.approx(0.4)
    with pytest.raises(ConfigError):
        nearest_rank_percentile(SCORES, 100.0)
    with pytest.raises(ConfigError):
        nearest_rank_percentile(SCORES, -1.0)


def test_score_percentile_requires_strict_exceedance():
    assert predict_score_percentile(SCORES, 80.0) == [(0, pytest.approx(0.4))]
    # a uniform row has nothing above its own percentile
    assert predict_score_percentile(np.full(4, 0.25), 80.0) == []
    # percentile 0 keeps everything above the minimum
    picked = predict_score_percentile(SCORES, 0.0)
    assert [e for e, _ in picked] == [0, 1, 2, 3]


def test_score_percentile_orders_by_score_then_index():
    picked = predict_score_percentile(np.array([0.3, 0.1, 0.3, 0.2]), 0.0)
    assert [e for e, _ in picked] == [0, 2, 3]


def test_topk_overfetch_counts():
    row = np.linspace(1.0, 0.0, 64)
    preds, clamped = predict_topk(row, k=8, overfetch=1.5)
    assert len(preds) == 12 and not clamped
    preds, clamped = predict_topk(np.linspace(1.0, 0.0, 8), k=2, overfetch=4.5)
    assert len(preds) == 8 and clamped
    _, exact = predict_topk(np.linspace(1.0, 0.0, 8), k=2, overfetch=4.0)
    assert not exact  # asking for the whole layer is not a clamp
    with pytest.raises(ConfigError):
        predict_topk(row, 8, overfetch=0.0)


def test_topk_prediction_matches_router_topk():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(1, 16)).astype(np.float32)
    preds, _ = predict_event(logits, k=4, mode=TOPK, overfetch=1.0)
    scores = softmax_rows(logits)[0]
    assert [e for e, _ in preds] == topk_indices(scores, 4)


def test_oracle_unions_rows_keeping_max_score():
    logits = np.array([[5.0, 0.0, 0.0, 0.0], [0.0, 4.0, 0.0, 0.0]], np.float32)
    preds, clamped = predict_event(logits, k=1, mode=ORACLE)
    assert not clamped
    experts = [e for e, _ in preds]
    assert experts == [0, 1]
    scores = dict(preds)
    row_scores = softmax_rows(logits)
    assert scores[0] == pytest.approx(float(row_scores[0, 0]))
    assert scores[1] == pytest.approx(float(row_scores[1, 1]))


def test_predict_event_rejects_unknown_mode():
    with pytest.raises(ConfigError, match="prefetch mode"):
        predict_event(np.zeros((1, 4)), 1, "psychic")


def test_predict_event_propagates_clamping():
    logits = np.zeros((1, 4), np.float32)
    _, clamped = predict_event(logits, k=2, mode=TOPK, overfetch=3.0)
    assert clamped


def test_noise_zero_is_identity_and_uses_no_randomness():
    rng = np.random.default_rng(0)
    preds = [(0, 0.5), (1, 0.2)]
    assert apply_prediction_noise(preds, 8, 0.0, rng) == preds
    assert rng.bit_generator.state == np.random.default_rng(0).bit_generator.state


def test_noise_one_swaps_against_the_chosen_set():
    rng = np.random.default_rng(1)
    preds = [(0, 0.5), (1, 0.2)]
    out = apply_prediction_noise(preds, 8, 1.0, rng)
    experts = [e for e, _ in out]
    assert len(set(experts)) == 2
    assert set(experts) != {0, 1}
    assert [s for _, s in out] == [0.5, 0.2]  # scores ride along


def test_noise_with_no_spare_experts_changes_nothing():
    rng = np.random.default_rng(2)
    preds = [(0, 0.6), (1, 0.4)]
    assert apply_prediction_noise(preds, 2, 1.0, rng) == preds


def test_noise_is_deterministic_per_seed():
    preds = [(i, 1.0 - i / 10) for i in range(4)]
    a = apply_prediction_noise(preds, 32, 0.5, np.random.default_rng(7))
    b = apply_prediction_noise(preds, 32, 0.5, np.random.default_rng(7))
    assert a == b


def test_noise_range_is_validated():
    with pytest.raises(ConfigError):
        apply_prediction_noise([(0, 1.0)], 4, 1.5, np.random.default_rng(0))


def test_prefetch_queue_is_fifo():
    q = PrefetchQueue()
    q.submit(PrefetchRequest(1, 0, 0.5, 0))
    q.submit(PrefetchRequest(1, 3, 0.4, 0))
    assert len(q) == 2
    assert q.pop().expert == 0
    assert q.pop().expert == 3


# --- watchdog ------------------------------------------------------------

class Callbacks:
    def __init__(self):
        self.started, self.skipped, self.dropped, self.evicted = [], [], [], []

    def on_start(self, req):
        self.started.append((req.target_layer, req.expert))

    def on_skip(self, req, reason):
        self.skipped.append(((req.target_layer, req.expert), reason))

    def on_drop(self, req, reason):
        self.dropped.append(((req.target_layer, req.expert), reason))

    def evict_fn(self, cache):
        def inner(victim, cause, forced):
            cache.evict(victim)
            self.evicted.append((victim, cause, forced))
        return inner


def run_watchdog(queue, cache, policy, channel, cb, now=0):
    ctx = AccessContext(layer=0, pass_id=1)
    return watchdog_step(
        queue, cache, policy, channel, now, ctx, 10, "fp16",
        cb.evict_fn(cache), cb.on_start, cb.on_skip, cb.on_drop,
    )


def test_watchdog_skips_residents_and_in_flight():
    cache = CacheState(capacity=30)
    policy = LRUPolicy()
    channel = Channel(10**6)
    cache.admit((1, 0), "fp16", 10, 0.9)
    policy.note_admit((1, 0), AccessContext(0, 0))
    channel.append((1, 1), 10, "prefetch", 0, 0.5, "fp16")
    cache.reserve(10)

    q = PrefetchQueue()
    q.submit(PrefetchRequest(1, 0, 0.9, 0))
    q.submit(PrefetchRequest(1, 1, 0.5, 0))
    q.submit(PrefetchRequest(1, 2, 0.4, 0))
    cb = Callbacks()
    started = run_watchdog(q, cache, policy, channel, cb)
    assert started == 1
    assert cb.skipped == [((1, 0), "resident"), ((1, 1), "in_flight")]
    assert cb.started == [(1, 2)]
    assert cache.free_bytes == 0  # 10 resident + 2 x 10 reserved
    assert channel.in_flight((1, 2)) is not None


def test_watchdog_marks_residents_before_making_space():
    # One slot, holding a stale expert that this very prediction selects
    # again. The resident mark must land before the missing peer asks for
    # space, so ls protects it and the peer is dropped.
    cache = CacheState(capacity=10)
    policy = LSPolicy()
    policy.begin_pass(0)
    cache.admit((1, 0), "fp16", 10, 0.9)
    policy.note_admit((1, 0), AccessContext(0, 0))
    policy.begin_pass(1)

    q = PrefetchQueue()
    q.submit(PrefetchRequest(1, 7, 0.8, 0))  # queued ahead of the resident
    q.submit(PrefetchRequest(1, 0, 0.9, 0))
    cb = Callbacks()
    channel = Channel(10**6)
    started = run_watchdog(q, cache, policy, channel, cb)
    assert started == 0
    assert cache.is_resident((1, 0))
    assert cb.skipped == [((1, 0), "resident")]
    assert cb.dropped == [((1, 7), "no_space")]
    assert cb.evicted == []
    assert policy.refusals == 1
    assert policy.unforced_current_evictions == 0


def test_watchdog_evicts_unforced_when_the_policy_allows():
    cache = CacheState(capacity=10)
    policy = LRUPolicy()
    cache.admit((1, 0), "fp16", 10, 0.9)
    policy.note_admit((1, 0), AccessContext(0, 0))

    q = PrefetchQueue()
    q.submit(PrefetchRequest(2, 3, 0.7, 0))
    cb = Callbacks()
    channel = Channel(10**6)
    started = run_watchdog(q, cache, policy, channel, cb)
    assert started == 1
    assert cb.evicted == [((1, 0), "prefetch", False)]
    assert not cache.is_resident((1, 0))
    assert channel.in_flight((2, 3)) is not None


def test_watchdog_ls_evicts_stale_but_never_current():
    cache = CacheState(capacity=20)
    policy = LSPolicy()
    policy.begin_pass(0)
    for e in (0, 1):
        cache.admit((1, e), "fp16", 10, 0.5)
        policy.note_admit((1, e), AccessContext(0, 0))
    policy.begin_pass(1)
    policy.note_access((1, 1), AccessContext(1, 1))  # promoted to current

    q = PrefetchQueue()
    q.submit(PrefetchRequest(2, 0, 0.9, 0))
    q.submit(PrefetchRequest(2, 1, 0.8, 0))
    cb = Callbacks()
    channel = Channel(10**6)
    started = run_watchdog(q, cache, policy, channel, cb)
    assert started == 1
    assert cb.evicted == [((1, 0), "prefetch", False)]  # the stale one
    assert cb.dropped == [((2, 1), "no_space")]
    assert cache.is_resident((1, 1))
