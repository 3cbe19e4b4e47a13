"""Miss classification, report assembly, and report emission.

The report is a plain nested dict with a fixed key order so serialized
bytes are stable for identical runs. Two independent paths can produce
it: the engine's online counters, and `replay_report`, which recomputes
everything from the event log alone; tests hold them equal.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

COMPULSORY = "compulsory"
COLLISION = "collision"
CAPACITY = "capacity"

# AccessRec outcomes
HIT = "hit"
MISS_FETCH = "fetch"
MISS_WAIT = "wait"
DROP = "drop"
SUBST = "subst"

MISS_OUTCOMES = (MISS_FETCH, MISS_WAIT)

Ident = tuple[int, int]


@dataclass
class ResidencyHistory:
    """What the run has seen per expert identity, for miss classification."""

    ever_resident: set[Ident] = field(default_factory=set)
    last_evicted_pass: dict[Ident, int] = field(default_factory=dict)

    def note_admit(self, ident: Ident) -> None:
        self.ever_resident.add(ident)

    def note_evict(self, ident: Ident, pass_id: int) -> None:
        self.last_evicted_pass[ident] = pass_id


def classify_miss(ident: Ident, pass_id: int, history: ResidencyHistory) -> str:
    """Classify a miss at the moment it happens (before any admission).

    Compulsory: the expert was never resident in this run. Collision: its
    latest eviction happened earlier in this same pass. Capacity: evicted
    in some earlier pass.
    """
    if ident not in history.ever_resident:
        return COMPULSORY
    if history.last_evicted_pass.get(ident) == pass_id:
        return COLLISION
    return CAPACITY


# --- event log records -------------------------------------------------

@dataclass
class AccessRec:
    pass_id: int
    layer: int
    expert: int
    tokens: int
    rank: int
    outcome: str               # hit | fetch | wait | drop | subst
    miss_class: str | None
    blocked_us: int
    weight_delta: float
    precision: str | None
    substitute: int | None = None


@dataclass
class EvictRec:
    pass_id: int
    layer: int
    victim_layer: int
    victim_expert: int
    precision: str
    cause: str                 # demand | prefetch
    forced: bool


@dataclass
class PrefetchRec:
    event: str                 # submitted | started | completed | skipped | dropped
    pass_id: int
    layer: int                 # layer at which the event occurred
    target_layer: int
    expert: int
    time_us: int
    score: float = 0.0
    reason: str = ""


@dataclass
class PredictionRec:
    pass_id: int
    layer: int                 # submitting layer
    target_layer: int
    experts: tuple[int, ...]
    clamped: bool


@dataclass
class RouteRec:
    pass_id: int
    layer: int
    rows: int
    faithful_rows: int
    modified_rows: int
    selected_mass: float
    original_mass: float
    executed_mass: float


@dataclass
class PassRec:
    pass_id: int
    kind: str
    tokens: int
    start_us: int
    end_us: int
    blocked_us: int


LogRecord = (
    AccessRec | EvictRec | PrefetchRec | PredictionRec | RouteRec | PassRec
)


# --- report assembly ----------------------------------------------------

TOTAL_FIELDS = (
    "demanded", "hits", "misses", "compulsory_misses", "collision_misses",
    "capacity_misses", "dropped", "substituted", "evictions",
    "forced_evictions", "prefetch_submitted", "prefetch_started",
    "prefetch_completed", "prefetch_skipped", "prefetch_dropped",
)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def prefetch_precision_recall(
    predictions: list[PredictionRec], demanded: dict[tuple[int, int], set[int]]
) -> dict:
    """Micro- and macro-averaged prediction quality over predicted layers.

    `demanded` maps (pass_id, layer) to the unique demanded expert set.
    Only (pass, layer) pairs that received a prediction participate. With
    no predictions at all, precision and recall report 1.0 and the
    zero_denominator flag is set.
    """
    tp = pred_total = dem_total = 0
    prec_parts: list[float] = []
    rec_parts: list[float] = []
    empty_predictions = 0
    for rec in predictions:
        dem = demanded.get((rec.pass_id, rec.target_layer), set())
        inter = len(dem.intersection(rec.experts))
        tp += inter
        pred_total += len(rec.experts)
        dem_total += len(dem)
        if rec.experts:
            prec_parts.append(inter / len(rec.experts))
        else:
            empty_predictions += 1
        if dem:
            rec_parts.append(inter / len(dem))
    zero_den = pred_total == 0
    return {
        "precision_micro": 1.0 if zero_den else tp / pred_total,
        "recall_micro": 1.0 if dem_total == 0 else _ratio(tp, dem_total),
        "precision_macro": _ratio(sum(prec_parts), len(prec_parts)) if prec_parts else 1.0,
        "recall_macro": _ratio(sum(rec_parts), len(rec_parts)) if rec_parts else 1.0,
        "predicted_layers": len(predictions),
        "predicted_total": pred_total,
        "predicted_hit_total": tp,
        "empty_predictions": empty_predictions,
        "zero_denominator": zero_den,
    }


def build_report(
    config_echo: dict,
    num_layers: int,
    per_layer_compute_us: int,
    log: list,
) -> dict:
    """Assemble the full report from the event log.

    This is the single assembly path: the engine hands its log here, and
    replaying a stored log through the same function must reproduce the
    report byte for byte.
    """
    accesses = [r for r in log if isinstance(r, AccessRec)]
    evictions = [r for r in log if isinstance(r, EvictRec)]
    prefetches = [r for r in log if isinstance(r, PrefetchRec)]
    predictions = [r for r in log if isinstance(r, PredictionRec)]
    routes = [r for r in log if isinstance(r, RouteRec)]
    passes = [r for r in log if isinstance(r, PassRec)]

    totals = dict.fromkeys(TOTAL_FIELDS, 0)
    per_layer = [
        {
            "layer": l,
            "demanded": 0,
            "hits": 0,
            "misses": 0,
            "compulsory_misses": 0,
            "collision_misses": 0,
            "capacity_misses": 0,
            "dropped": 0,
            "substituted": 0,
        }
        for l in range(num_layers)
    ]
    demanded_sets: dict[tuple[int, int], set[int]] = {}
    blocked_total = 0
    for rec in accesses:
        row = per_layer[rec.layer]
        totals["demanded"] += 1
        row["demanded"] += 1
        demanded_sets.setdefault((rec.pass_id, rec.layer), set()).add(rec.expert)
        blocked_total += rec.blocked_us
        if rec.outcome == HIT:
            totals["hits"] += 1
            row["hits"] += 1
        elif rec.outcome in MISS_OUTCOMES:
            totals["misses"] += 1
            row["misses"] += 1
            totals[f"{rec.miss_class}_misses"] += 1
            row[f"{rec.miss_class}_misses"] += 1
        elif rec.outcome == DROP:
            totals["dropped"] += 1
            row["dropped"] += 1
        elif rec.outcome == SUBST:
            totals["substituted"] += 1
            row["substituted"] += 1
        else:
            raise ValueError(f"unknown access outcome {rec.outcome!r}")

    totals["evictions"] = len(evictions)
    totals["forced_evictions"] = sum(1 for e in evictions if e.forced)
    for rec in prefetches:
        totals[f"prefetch_{rec.event}"] += 1

    # per-layer prediction set sizes (keyed by target layer)
    sizes: dict[int, list[int]] = {}
    for rec in predictions:
        sizes.setdefault(rec.target_layer, []).append(len(rec.experts))
    for l in range(num_layers):
        row = per_layer[l]
        row["collision_rate_demanded"] = _ratio(row["collision_misses"], row["demanded"])
        row["collision_rate_misses"] = _ratio(row["collision_misses"], row["misses"])
        row["mean_prediction_set_size"] = (
            _ratio(sum(sizes[l]), len(sizes[l])) if l in sizes else 0.0
        )

    rates = {
        "hit_rate": _ratio(totals["hits"], totals["demanded"]),
        "miss_rate": _ratio(totals["misses"], totals["demanded"]),
        "collision_rate_demanded": _ratio(totals["collision_misses"], totals["demanded"]),
        "collision_rate_misses": _ratio(totals["collision_misses"], totals["misses"]),
        "drop_rate": _ratio(totals["dropped"], totals["demanded"]),
        "substitution_rate": _ratio(totals["substituted"], totals["demanded"]),
    }

    rows_total = sum(r.rows for r in routes)
    faithful = sum(r.faithful_rows for r in routes)
    modified = sum(r.modified_rows for r in routes)
    original_mass = sum(r.original_mass for r in routes)
    executed_mass = sum(r.executed_mass for r in routes)
    fidelity = {
        "routing_fidelity": _ratio(faithful, rows_total) if rows_total else 1.0,
        "weight_mass_preserved": _ratio(executed_mass, original_mass)
        if original_mass
        else 1.0,
        "modified_rows": modified,
        "total_rows": rows_total,
    }

    ttft_us = passes[0].end_us if passes else 0
    end_us = passes[-1].end_us if passes else 0
    decode_passes = sum(1 for p in passes if p.kind == "decode")
    decode_us = sum(p.end_us - p.start_us for p in passes if p.kind == "decode")
    timing = {
        "ttft_us": ttft_us,
        "total_us": end_us,
        "decode_us": decode_us,
        "sync_overhead_us": blocked_total,
        "passes": len(passes),
        "decode_passes": decode_passes,
        "per_layer_compute_us": per_layer_compute_us,
        "decode_tokens_per_sec": (
            decode_passes * 1_000_000 / decode_us if decode_us > 0 else 0.0
        ),
    }

    report = {
        "config": config_echo,
        "totals": totals,
        "rates": rates,
        "timing": timing,
        "fidelity": fidelity,
        "prefetch": prefetch_precision_recall(predictions, demanded_sets),
        "per_layer": per_layer,
    }
    check_identities(report)
    return report


def check_identities(report: dict) -> None:
    """Raise ValueError if the report's accounting identities do not hold."""
    t = report["totals"]
    resolved = t["hits"] + t["misses"] + t["dropped"] + t["substituted"]
    if resolved != t["demanded"]:
        raise ValueError(
            f"accounting identity broken: hits+misses+dropped+substituted="
            f"{resolved} != demanded={t['demanded']}"
        )
    classed = t["compulsory_misses"] + t["collision_misses"] + t["capacity_misses"]
    if classed != t["misses"]:
        raise ValueError(
            f"accounting identity broken: miss classes sum {classed} != misses={t['misses']}"
        )
    for row in report["per_layer"]:
        resolved = row["hits"] + row["misses"] + row["dropped"] + row["substituted"]
        if resolved != row["demanded"]:
            raise ValueError(f"per-layer identity broken at layer {row['layer']}")


def replay_report(
    config_echo: dict, num_layers: int, per_layer_compute_us: int, log: list
) -> dict:
    """Recompute the report from a stored event log."""
    return build_report(config_echo, num_layers, per_layer_compute_us, log)


# --- emission ------------------------------------------------------------

def flatten_report(report: dict) -> dict:
    """One flat row per run for sweep CSVs; fixed column order."""
    row: dict[str, object] = {}
    cfg = report["config"]
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, dict):
            for sub in sorted(value):
                row[f"{key}.{sub}"] = value[sub]
        else:
            row[key] = value
    for section in ("totals", "rates", "timing", "fidelity", "prefetch"):
        for key, value in report[section].items():
            row[f"{section}.{key}"] = value
    return row


def emit(report: dict, fmt: str, path: str | Path) -> list[Path]:
    """Write a report.

    json: the full report at `path`, plus a plot-ready per-layer table
    next to it (<stem>_layers.csv). csv: append one flat row to `path`,
    writing the header first when the file is new or empty.

    Returns the paths written.
    """
    check_identities(report)
    path = Path(path)
    written = [path]
    if fmt == "json":
        path.write_text(json.dumps(report, indent=2) + "\n")
        layers_path = path.with_name(path.stem + "_layers.csv")
        with open(layers_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(report["per_layer"][0]))
            writer.writeheader()
            writer.writerows(report["per_layer"])
        written.append(layers_path)
    elif fmt == "csv":
        row = flatten_report(report)
        new_file = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            if new_file:
                writer.writeheader()
            writer.writerow(row)
    else:
        raise ValueError(f"unknown report format {fmt!r}; expected json or csv")
    return written
