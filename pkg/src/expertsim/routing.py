"""Router math: softmax top-k selection and cache-aware logit biasing.

All softmax arithmetic runs at float32 to match the stored trace width.
Cache-aware routing has dual-logit semantics: the biased logits decide
*which* experts run, the original softmax decides their weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ConfigError

STANDARD = "standard"
CACHE_AWARE = "cache_aware"

LAMBDA_RANGE = (0.0, 10.0)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise float32 softmax of a (tokens, experts) matrix."""
    x = np.asarray(logits, dtype=np.float32)
    if x.ndim == 1:
        x = x[None, :]
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted, dtype=np.float32)
    return e / e.sum(axis=1, keepdims=True, dtype=np.float32)


def topk_indices(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest scores, ties broken toward the lower index."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return [int(i) for i in order[:k]]


def softmax_topk(logits: np.ndarray, k: int) -> tuple[list[int], list[float]]:
    """Select k experts from one logits row.

    Args:
        logits: One row of router logits, length E.
        k: Number of experts to select, 1 <= k <= E.

    Returns:
        (indices, scores): selected expert indices in descending score
        order, and their softmax scores. The softmax is taken over all E
        experts, so the full score vector sums to 1 before truncation.
    """
    row = np.asarray(logits, dtype=np.float32)
    if row.ndim != 1:
        raise ValueError("softmax_topk expects a single logits row")
    if not (1 <= k <= row.shape[0]):
        raise ConfigError(f"k must be in [1, {row.shape[0]}], got {k}")
    scores = softmax_rows(row)[0]
    idx = topk_indices(scores, k)
    return idx, [float(scores[i]) for i in idx]


def apply_cache_aware_bias(
    logits: np.ndarray, cached: set[int], lam: float, delta_avg: float
) -> np.ndarray:
    """Return a biased copy of one logits row: z + lam * delta_avg * 1_cached."""
    row = np.asarray(logits, dtype=np.float32).copy()
    if lam != 0.0 and delta_avg != 0.0 and cached:
        bias = np.float32(lam * delta_avg)
        for e in cached:
            row[e] += bias
    return row


@dataclass
class DeltaAvgState:
    """Per-layer running mean of every observed logit entry.

    The mean a row's bias uses is the state *before* that row is folded in;
    the first row ever routed at a layer sees 0.0 (no bias).
    """

    sums: dict[int, float] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def mean(self, layer: int) -> float:
        n = self.counts.get(layer, 0)
        return self.sums.get(layer, 0.0) / n if n else 0.0

    def update(self, layer: int, rows: np.ndarray) -> None:
        rows = np.asarray(rows)
        self.sums[layer] = self.sums.get(layer, 0.0) + float(rows.sum(dtype=np.float64))
        self.counts[layer] = self.counts.get(layer, 0) + int(rows.size)


@dataclass
class RoutingDecision:
    selected: list[int]          # executed experts, biased-score order
    weights: list[float]         # original-softmax scores at `selected`
    original_selected: list[int]  # what standard routing would have picked
    original_weights: list[float]  # original-softmax scores at `original_selected`
    modified: bool               # selected set differs from original set


def validate_lambda(lam: float) -> float:
    lo, hi = LAMBDA_RANGE
    if not (lo <= lam <= hi):
        raise ConfigError(f"lambda must be in [{lo}, {hi}], got {lam}")
    return lam


def route_event(
    logits: np.ndarray,
    k: int,
    policy: str,
    lam: float,
    cached: set[int],
    delta: DeltaAvgState,
    layer: int,
) -> list[RoutingDecision]:
    """Route every token row of one layer event.

    Args:
        logits: (tokens, experts) float32 matrix for this layer event.
        k: Experts per token.
        policy: STANDARD or CACHE_AWARE.
        lam: Bias strength (CACHE_AWARE only).
        cached: Expert indices currently resident at this layer.
        delta: Running-mean state, updated here row by row.
        layer: Layer index, used to address `delta`.

    Returns:
        One RoutingDecision per token row, in row order.
    """
    mat = np.asarray(logits, dtype=np.float32)
    scores = softmax_rows(mat)
    decisions: list[RoutingDecision] = []

    if policy == STANDARD:
        for r in range(mat.shape[0]):
            idx = topk_indices(scores[r], k)
            w = [float(scores[r][i]) for i in idx]
            decisions.append(RoutingDecision(idx, w, list(idx), list(w), False))
        delta.update(layer, mat)
        return decisions

    if policy != CACHE_AWARE:
        raise ConfigError(f"unknown routing policy {policy!r}")

    for r in range(mat.shape[0]):
        original = topk_indices(scores[r], k)
        biased = apply_cache_aware_bias(mat[r], cached, lam, delta.mean(layer))
        selected = topk_indices(softmax_rows(biased)[0], k)
        delta.update(layer, mat[r])
        decisions.append(
            RoutingDecision(
                selected,
                [float(scores[r][i]) for i in selected],
                original,
                [float(scores[r][i]) for i in original],
                set(selected) != set(original),
            )
        )
    return decisions
