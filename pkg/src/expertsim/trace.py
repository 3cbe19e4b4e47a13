"""Routing-trace format and synthetic trace generation.

A trace file is line-delimited JSON. The first line is the model-spec
record; every following line is one layer event carrying the full router
logits matrix (tokens x experts) for that layer of that forward pass.
Logits are stored at float32; values survive a write/read round trip
bit-exactly because the shortest-decimal repr of a float is recovered by
the float64 -> float32 cast on read.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ConfigError, ModelSpec

PREFILL = "prefill"
DECODE = "decode"


class TraceFormatError(ValueError):
    """Raised when a trace file cannot be parsed or is inconsistent."""


@dataclass
class LayerEvent:
    pass_id: int
    kind: str
    layer: int
    logits: np.ndarray  # float32, shape (tokens, experts)

    @property
    def tokens(self) -> int:
        return self.logits.shape[0]


@dataclass
class ForwardPass:
    pass_id: int
    kind: str
    events: list[LayerEvent]


@dataclass
class Trace:
    spec: ModelSpec
    passes: list[ForwardPass]
    meta: dict = field(default_factory=dict)

    @property
    def num_passes(self) -> int:
        return len(self.passes)

    @property
    def decode_passes(self) -> int:
        return sum(1 for p in self.passes if p.kind == DECODE)

    def validate(self) -> None:
        """Check structural invariants; raises TraceFormatError naming the spot."""
        for want_pass, fp in enumerate(self.passes):
            if fp.pass_id != want_pass:
                raise TraceFormatError(
                    f"pass {fp.pass_id}: expected pass_id {want_pass}"
                )
            if len(fp.events) != self.spec.num_layers:
                raise TraceFormatError(
                    f"pass {fp.pass_id}: has {len(fp.events)} layer events, "
                    f"expected {self.spec.num_layers}"
                )
            tokens = fp.events[0].tokens if fp.events else 0
            for want_layer, ev in enumerate(fp.events):
                where = f"pass {fp.pass_id} layer {ev.layer}"
                if ev.layer != want_layer:
                    raise TraceFormatError(
                        f"pass {fp.pass_id}: expected layer {want_layer}, got {ev.layer}"
                    )
                if ev.kind != fp.kind:
                    raise TraceFormatError(f"{where}: kind {ev.kind!r} != pass kind {fp.kind!r}")
                if ev.logits.ndim != 2 or ev.logits.shape[1] != self.spec.experts_per_layer:
                    raise TraceFormatError(
                        f"{where}: logits shape {ev.logits.shape} does not match "
                        f"{self.spec.experts_per_layer} experts"
                    )
                if ev.tokens != tokens:
                    raise TraceFormatError(
                        f"{where}: {ev.tokens} token rows, pass started with {tokens}"
                    )
                if ev.tokens == 0:
                    raise TraceFormatError(f"{where}: empty logits matrix")
                if not np.isfinite(ev.logits).all():
                    raise TraceFormatError(f"{where}: non-finite logit value")


def generate_synthetic(
    spec: ModelSpec,
    seed: int,
    prefill_tokens: int,
    decode_tokens: int,
    affinity: float = 0.6,
    skew: float = 1.0,
    drift: float = 0.0,
    depth_bias: float = 0.0,
) -> Trace:
    """Generate a synthetic routing trace.

    Per layer a fixed base logit vector is drawn from N(0, 1) and scaled by
    `skew` (larger skew concentrates popularity on fewer experts). Token t's
    logits are base + affinity * (previous token's deviation from base) +
    (1 - affinity) * fresh N(0, 1) noise, so affinity=1.0 repeats the first
    deviation state (identical selections) and affinity=0.0 makes tokens
    independent. The deviation chain runs through the whole request: one
    prefill pass of `prefill_tokens` rows, then `decode_tokens` single-row
    decode passes.

    `drift` moves the base vector itself by a N(0, drift) step at every
    pass boundary, so the popularity ranking wanders as a generation
    progresses instead of staying pinned to the pass-0 mix. drift=0.0 keeps
    the base fixed and reproduces the stationary generator exactly.

    `depth_bias` grades router confidence by depth: the whole logit row of
    layer l is multiplied by a factor sliding geometrically from
    (1 + depth_bias) at layer 0 to 1 / (1 + depth_bias) at the last layer,
    so early layers route with concentrated gate scores and deep layers
    route nearly uniformly. depth_bias=0.0 leaves all layers at the same
    temperature.

    Deterministic in (spec geometry, seed, parameters).
    """
    if prefill_tokens < 1:
        raise ConfigError("prefill_tokens must be >= 1")
    if decode_tokens < 0:
        raise ConfigError("decode_tokens must be >= 0")
    if not (0.0 <= affinity <= 1.0):
        raise ConfigError("affinity must be in [0, 1]")
    if skew < 0.0:
        raise ConfigError("skew must be >= 0")
    if drift < 0.0:
        raise ConfigError("drift must be >= 0")
    if depth_bias < 0.0:
        raise ConfigError("depth_bias must be >= 0")

    L, E = spec.num_layers, spec.experts_per_layer
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((L, E)) * skew
    dev = np.zeros((L, E))
    if L > 1:
        exponents = 1.0 - 2.0 * np.arange(L) / (L - 1)
    else:
        exponents = np.zeros(1)
    layer_scale = ((1.0 + depth_bias) ** exponents)[:, None]

    def next_token_row() -> np.ndarray:
        nonlocal dev
        eps = rng.standard_normal((L, E))
        dev = affinity * dev + (1.0 - affinity) * eps
        return (base + dev) * layer_scale

    passes: list[ForwardPass] = []
    token_counts = [prefill_tokens] + [1] * decode_tokens
    for pass_id, tokens in enumerate(token_counts):
        if pass_id > 0 and drift > 0.0:
            base = base + drift * rng.standard_normal((L, E))
        kind = PREFILL if pass_id == 0 else DECODE
        rows = np.stack([next_token_row() for _ in range(tokens)], axis=1)
        events = [
            LayerEvent(pass_id, kind, layer, rows[layer].astype(np.float32))
            for layer in range(L)
        ]
        passes.append(ForwardPass(pass_id, kind, events))

    meta = {
        "generator": {
            "seed": seed,
            "prefill_tokens": prefill_tokens,
            "decode_tokens": decode_tokens,
            "affinity": affinity,
            "skew": skew,
            "drift": drift,
            "depth_bias": depth_bias,
        }
    }
    trace = Trace(spec, passes, meta)
    trace.validate()
    return trace


def write_trace(trace: Trace, path: str | Path) -> None:
    """Write a trace to `path` in the line-delimited format."""
    spec = trace.spec
    header = {
        "record": "spec",
        "name": spec.name,
        "num_layers": spec.num_layers,
        "experts_per_layer": spec.experts_per_layer,
        "top_k": spec.top_k,
        "expert_bytes_fp16": spec.expert_bytes_fp16,
        "precisions": list(spec.precisions),
    }
    if trace.meta:
        header["meta"] = trace.meta
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for fp in trace.passes:
            for ev in fp.events:
                rec = {
                    "record": "event",
                    "pass_id": ev.pass_id,
                    "kind": ev.kind,
                    "layer": ev.layer,
                    "logits": ev.logits.tolist(),
                }
                fh.write(json.dumps(rec) + "\n")


def read_trace(path: str | Path) -> Trace:
    """Read a trace file; raises TraceFormatError naming pass/layer on problems."""
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise TraceFormatError(f"{path}: empty trace file")

    def parse_line(lineno: int, line: str) -> dict:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from None
        if not isinstance(obj, dict) or "record" not in obj:
            raise TraceFormatError(f"{path}:{lineno}: expected a record object")
        return obj

    header = parse_line(1, lines[0])
    if header.get("record") != "spec":
        raise TraceFormatError(f"{path}:1: first record must be the model spec")
    try:
        spec = ModelSpec(
            name=str(header["name"]),
            num_layers=int(header["num_layers"]),
            experts_per_layer=int(header["experts_per_layer"]),
            top_k=int(header["top_k"]),
            expert_bytes_fp16=int(header["expert_bytes_fp16"]),
            precisions=tuple(header["precisions"]),
        )
    except KeyError as exc:
        raise TraceFormatError(f"{path}:1: spec record missing {exc}") from None
    except ConfigError as exc:
        raise TraceFormatError(f"{path}:1: bad spec record: {exc}") from None
    meta = header.get("meta", {})

    passes: list[ForwardPass] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        obj = parse_line(lineno, line)
        if obj.get("record") != "event":
            raise TraceFormatError(f"{path}:{lineno}: unexpected record {obj.get('record')!r}")
        try:
            pass_id = int(obj["pass_id"])
            kind = str(obj["kind"])
            layer = int(obj["layer"])
            logits = np.asarray(obj["logits"], dtype=np.float32)
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(f"{path}:{lineno}: bad event record: {exc}") from None
        if kind not in (PREFILL, DECODE):
            raise TraceFormatError(
                f"pass {pass_id} layer {layer}: unknown kind {kind!r}"
            )
        ev = LayerEvent(pass_id, kind, layer, logits)
        if not passes or passes[-1].pass_id != pass_id:
            passes.append(ForwardPass(pass_id, kind, []))
        passes[-1].events.append(ev)

    trace = Trace(spec, passes, meta)
    trace.validate()
    return trace
