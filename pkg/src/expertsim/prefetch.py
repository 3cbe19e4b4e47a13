"""Next-layer prefetch prediction and the transfer watchdog.

Predictors read the next layer's router logits straight from the trace.
Multi-token (prefill) events union the per-token predictions keeping each
expert's maximum score. The watchdog drains the request queue in FIFO
order, skipping residents and in-flight experts, evicting unforced to make
room, and refusing (dropping) requests the eviction policy will not make
room for.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .models import ConfigError
from .routing import softmax_rows, topk_indices

NONE = "none"
TOPK = "topk"
SCORE = "score"
ORACLE = "oracle"

PREFETCH_MODES = (NONE, TOPK, SCORE, ORACLE)


def nearest_rank_percentile(values: np.ndarray, p: float) -> float:
    """Nearest-rank p-th percentile of `values` (p in [0, 100))."""
    if not (0.0 <= p < 100.0):
        raise ConfigError(f"percentile must be in [0, 100), got {p}")
    v = np.sort(np.asarray(values), kind="stable")
    rank = max(1, math.ceil(p / 100.0 * v.shape[0]))
    return float(v[rank - 1])


def predict_topk(
    scores: np.ndarray, k: int, overfetch: float
) -> tuple[list[tuple[int, float]], bool]:
    """Top ceil(k * overfetch) experts of one score row.

    Returns (predictions, clamped) where clamped reports that the requested
    count exceeded E and was cut down.
    """
    if overfetch <= 0:
        raise ConfigError(f"overfetch must be positive, got {overfetch}")
    count = math.ceil(k * overfetch)
    E = scores.shape[0]
    clamped = count > E
    count = min(count, E)
    idx = topk_indices(scores, count)
    return [(i, float(scores[i])) for i in idx], clamped


def predict_score_percentile(
    scores: np.ndarray, percentile: float
) -> list[tuple[int, float]]:
    """Experts whose score strictly exceeds the row's nearest-rank percentile."""
    threshold = nearest_rank_percentile(scores, percentile)
    picked = [(int(i), float(s)) for i, s in enumerate(scores) if float(s) > threshold]
    picked.sort(key=lambda t: (-t[1], t[0]))
    return picked


def predict_event(
    next_logits: np.ndarray,
    k: int,
    mode: str,
    overfetch: float = 1.0,
    percentile: float = 80.0,
) -> tuple[list[tuple[int, float]], bool]:
    """Predict the next layer's demand from its logits matrix.

    Args:
        next_logits: (tokens, experts) logits of the layer being predicted.
        k: The router's top-k (used by TOPK and ORACLE).
        mode: TOPK, SCORE, or ORACLE.
        overfetch: TOPK multiplier on k.
        percentile: SCORE threshold percentile.

    Returns:
        (predictions, clamped): per-expert (index, score) pairs sorted by
        descending score then index, unioned over token rows with the max
        score kept; `clamped` is True if a TOPK count hit the expert count.
    """
    scores = softmax_rows(next_logits)
    best: dict[int, float] = {}
    clamped = False
    for r in range(scores.shape[0]):
        row = scores[r]
        if mode == TOPK:
            preds, c = predict_topk(row, k, overfetch)
            clamped = clamped or c
        elif mode == SCORE:
            preds = predict_score_percentile(row, percentile)
        elif mode == ORACLE:
            idx = topk_indices(row, k)
            preds = [(i, float(row[i])) for i in idx]
        else:
            raise ConfigError(f"unknown prefetch mode {mode!r}")
        for e, s in preds:
            if e not in best or s > best[e]:
                best[e] = s
    merged = sorted(best.items(), key=lambda t: (-t[1], t[0]))
    return merged, clamped


def apply_prediction_noise(
    predictions: list[tuple[int, float]],
    num_experts: int,
    noise: float,
    rng: np.random.Generator,
) -> list[tuple[int, float]]:
    """Swap each predicted expert for a random other one with probability `noise`.

    Models imperfect speculation; scores ride along with the swap. noise=0
    returns the input untouched (and consumes no randomness).
    """
    if noise == 0.0 or not predictions:
        return predictions
    if not (0.0 <= noise <= 1.0):
        raise ConfigError(f"prediction noise must be in [0, 1], got {noise}")
    chosen = {e for e, _ in predictions}
    out: list[tuple[int, float]] = []
    for e, s in predictions:
        if rng.random() < noise:
            candidates = [x for x in range(num_experts) if x not in chosen]
            if candidates:
                swap = candidates[rng.integers(len(candidates))]
                chosen.discard(e)
                chosen.add(swap)
                e = swap
        out.append((e, s))
    return out


@dataclass
class PrefetchRequest:
    target_layer: int
    expert: int
    score: float
    submit_us: int


class PrefetchQueue:
    """FIFO of submitted prefetch requests awaiting the watchdog."""

    def __init__(self) -> None:
        self._q: deque[PrefetchRequest] = deque()

    def submit(self, req: PrefetchRequest) -> None:
        self._q.append(req)

    def __len__(self) -> int:
        return len(self._q)

    def pop(self) -> PrefetchRequest:
        return self._q.popleft()


def watchdog_step(
    queue: PrefetchQueue,
    cache,
    policy,
    channel,
    now_us: int,
    ctx,
    nbytes: int,
    precision: str,
    evict_fn,
    on_start,
    on_skip,
    on_drop,
) -> int:
    """Drain the prefetch queue, starting transfers where space allows.

    Two sweeps. The first settles every request that needs no transfer:
    residents are marked as prefetch-selected (shielding them from policies
    that protect selected experts) and in-flight experts are skipped. Only
    then does the second sweep admit the missing experts, evicting unforced
    until `nbytes` fit or dropping the request if the policy refuses. The
    ordering matters: a resident selection must never be evicted to make
    room for a peer request from the same prediction. Started transfers
    reserve their bytes on the channel immediately. Returns the number of
    transfers started.

    The cache, channel, and callback arguments are engine-owned; this
    function only sequences the policy decisions.
    """
    to_fetch: list[PrefetchRequest] = []
    while len(queue):
        req = queue.pop()
        ident = (req.target_layer, req.expert)
        if cache.is_resident(ident):
            policy.note_prefetch_hit(ident, ctx)
            on_skip(req, "resident")
        elif channel.in_flight(ident) is not None:
            on_skip(req, "in_flight")
        else:
            to_fetch.append(req)

    started = 0
    for req in to_fetch:
        ident = (req.target_layer, req.expert)
        refused = False
        while cache.free_bytes < nbytes:
            victim = policy.select_victim(ctx, forced=False)
            if victim is None:
                on_drop(req, "no_space")
                refused = True
                break
            evict_fn(victim, "prefetch", False)
        if refused:
            continue
        cache.reserve(nbytes)
        channel.append(ident, nbytes, "prefetch", now_us, req.score, precision)
        on_start(req)
        started += 1
    return started
