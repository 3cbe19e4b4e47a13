"""Command-line front end: trace generation, single runs, and policy sweeps.

Settings resolve in layers: built-in defaults, then a `--config` file, then
a `--preset` stack, then explicit flags. Policy tokens carry their tuning
argument after a colon (`topk:1.5`, `score:80`, `drop:2`, `subst:0.05`), so
every flag maps onto exactly one simulation config field. The environment
variable EXPERTSIM_OUT_DIR picks the default output directory; explicit
`--out` paths are used as given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from itertools import product
from pathlib import Path

from .engine import SimConfig, run_simulation
from .eviction import EVICTION_NAMES
from .metrics import emit
from .miss import DROP, FETCH, FETCH_LOW, FETCH_PRIORITY, SUBST
from .models import (
    GB,
    ConfigError,
    HardwareSpec,
    ModelSpec,
    PRECISION_ORDER,
    builtin_spec,
    load_spec_file,
)
from .prefetch import NONE, ORACLE, SCORE, TOPK
from .routing import CACHE_AWARE, STANDARD
from .trace import Trace, TraceFormatError, generate_synthetic, read_trace, write_trace

# Sweep-only eviction token: keep whatever eviction the row's stack already
# uses. Lets one sweep compare each baseline stack against an ls drop-in.
ORIGINAL = "original"

DEFAULTS: dict[str, object] = {
    "working": "fp16",
    "routing": STANDARD,
    "lam": 0.3,
    "eviction": "lru",
    "sb_decay": 0.9,
    "prefetch": NONE,
    "prefetch_noise": 0.0,
    "miss": FETCH,
    "degrade_percentile": 60.0,
    "capacity": 0.05,
    "capacity_bytes": None,
    "bandwidth": 5 * GB,
    "compute_us": 2000,
    "seed": 0,
    "precisions": None,
}

# The five bundled baseline stacks (see README). Each pins the full policy
# combination and its working precision; config3 fetches down a reduced
# precision ladder, so it also narrows the model's precision list.
PRESETS: dict[str, dict[str, object]] = {
    "config1": {
        "prefetch": "topk:1.0", "eviction": "lru", "miss": "fetch",
        "routing": STANDARD, "working": "int4",
    },
    "config2": {
        "prefetch": "score:80", "eviction": "sb", "miss": "subst",
        "routing": STANDARD, "working": "int4",
    },
    "config3": {
        "prefetch": "topk:1.0", "eviction": "lhu", "miss": "fetch_priority",
        "routing": STANDARD, "working": "int8", "precisions": "int8,int4,int2",
    },
    "config4": {
        "prefetch": "none", "eviction": "lru", "miss": "fetch",
        "routing": CACHE_AWARE, "lam": 0.3, "working": "int4",
    },
    "config5": {
        "prefetch": "score:80", "eviction": "ls", "miss": "fetch",
        "routing": STANDARD, "working": "int4",
    },
}


def _as_int(text: str) -> int:
    """Integer coercion that tolerates scientific notation ('5e9')."""
    return int(float(text))


_SETTING_TYPES: dict[str, type | object] = {
    "working": str,
    "routing": str,
    "lam": float,
    "eviction": str,
    "sb_decay": float,
    "prefetch": str,
    "prefetch_noise": float,
    "miss": str,
    "degrade_percentile": float,
    "capacity": float,
    "capacity_bytes": _as_int,
    "bandwidth": _as_int,
    "compute_us": _as_int,
    "seed": _as_int,
    "precisions": str,
}

# Axes a sweep may enumerate, with the coercion for each listed value.
SWEEP_AXES: tuple[tuple[str, object], ...] = (
    ("preset", str),
    ("eviction", str),
    ("prefetch", str),
    ("miss", str),
    ("lam", float),
    ("capacity", float),
    ("bandwidth", _as_int),
)
_AXIS_KEYS = tuple(name for name, _ in SWEEP_AXES)


# --- policy tokens ---------------------------------------------------------

def parse_prefetch_token(token: str) -> dict[str, object]:
    """Expand a prefetch token into simulation config field overrides."""
    name, _, arg = token.partition(":")
    if name in (NONE, ORACLE):
        if arg:
            raise ConfigError(f"prefetch {name!r} takes no argument, got {token!r}")
        return {"prefetch": name}
    if name == TOPK:
        out: dict[str, object] = {"prefetch": TOPK}
        if arg:
            out["overfetch"] = _token_number(token, "overfetch", arg)
        return out
    if name == SCORE:
        out = {"prefetch": SCORE}
        if arg:
            out["percentile"] = _token_number(token, "percentile", arg)
        return out
    raise ConfigError(
        f"unknown prefetch token {token!r}; expected none, oracle, "
        f"topk[:OVERFETCH], or score[:PERCENTILE]"
    )


def parse_miss_token(token: str) -> dict[str, object]:
    """Expand a miss-handling token into simulation config field overrides."""
    name, _, arg = token.partition(":")
    if name in (FETCH, FETCH_LOW, FETCH_PRIORITY):
        if arg:
            raise ConfigError(f"miss {name!r} takes no argument, got {token!r}")
        return {"miss": name}
    if name == DROP:
        out: dict[str, object] = {"miss": DROP}
        if arg:
            out["drop_rank_threshold"] = int(_token_number(token, "rank", arg))
        return out
    if name == SUBST:
        out = {"miss": SUBST}
        if arg:
            out["subst_tolerance"] = _token_number(token, "tolerance", arg)
        return out
    raise ConfigError(
        f"unknown miss token {token!r}; expected fetch, fetch_low, "
        f"fetch_priority, drop[:RANK], or subst[:TOLERANCE]"
    )


def _token_number(token: str, what: str, arg: str) -> float:
    try:
        return float(arg)
    except ValueError:
        raise ConfigError(f"bad {what} in policy token {token!r}") from None


def _parse_precisions(value: object) -> tuple[str, ...]:
    if isinstance(value, (tuple, list)):
        return tuple(value)
    return tuple(p.strip() for p in str(value).split(",") if p.strip())


# --- settings resolution -----------------------------------------------------

def load_run_config_file(path: str | Path) -> dict[str, object]:
    """Parse a `key = value` settings file into one override layer."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = key.strip(), value.strip()
        if key not in _SETTING_TYPES:
            raise ConfigError(
                f"{path}:{lineno}: unknown setting {key!r}; valid keys: "
                + ", ".join(sorted(_SETTING_TYPES))
            )
        try:
            out[key] = _SETTING_TYPES[key](value)  # type: ignore[operator]
        except ValueError:
            raise ConfigError(
                f"{path}:{lineno}: bad value for {key}: {value!r}"
            ) from None
    return out


def _merge(settings: dict, layer: dict, explicit: set[str]) -> None:
    for key, value in layer.items():
        settings[key] = value
        explicit.add(key)


def flag_overrides(args: argparse.Namespace, skip: tuple[str, ...] = ()) -> dict:
    """Settings explicitly present on the command line."""
    out: dict[str, object] = {}
    for key in _SETTING_TYPES:
        if key in skip:
            continue
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def build_config(settings: dict, explicit: set[str], spec: ModelSpec) -> SimConfig:
    """Materialize a SimConfig for `spec`'s geometry from layered settings."""
    if settings.get("precisions"):
        spec = replace(spec, precisions=_parse_precisions(settings["precisions"]))
    # A fraction is the default; explicit capacity_bytes replaces it unless a
    # fraction was itself given explicitly (then HardwareSpec rejects the pair).
    if "capacity_bytes" in explicit and "capacity" not in explicit:
        fraction, cap_bytes = None, int(settings["capacity_bytes"])
    elif "capacity_bytes" in explicit:
        fraction, cap_bytes = float(settings["capacity"]), int(settings["capacity_bytes"])
    else:
        fraction, cap_bytes = float(settings["capacity"]), None
    hardware = HardwareSpec(
        capacity_fraction=fraction,
        capacity_bytes=cap_bytes,
        bandwidth_bytes_per_sec=int(settings["bandwidth"]),
        per_layer_compute_us=int(settings["compute_us"]),
    )
    if settings["eviction"] == ORIGINAL:
        raise ConfigError(
            "eviction 'original' is only meaningful as a sweep axis value; "
            "expected one of " + ", ".join(EVICTION_NAMES)
        )
    fields: dict[str, object] = {
        "working_precision": str(settings["working"]),
        "routing": str(settings["routing"]),
        "lam": float(settings["lam"]),
        "eviction": str(settings["eviction"]),
        "sb_decay": float(settings["sb_decay"]),
        "prefetch_noise": float(settings["prefetch_noise"]),
        "degrade_percentile": float(settings["degrade_percentile"]),
        "seed": int(settings["seed"]),
    }
    fields.update(parse_prefetch_token(str(settings["prefetch"])))
    fields.update(parse_miss_token(str(settings["miss"])))
    return SimConfig(model=spec, hardware=hardware, **fields)


def resolve_run_settings(args: argparse.Namespace) -> tuple[dict, set[str]]:
    settings = dict(DEFAULTS)
    explicit: set[str] = set()
    if args.config:
        _merge(settings, load_run_config_file(args.config), explicit)
    if args.preset:
        _merge(settings, PRESETS[args.preset], explicit)
    _merge(settings, flag_overrides(args), explicit)
    return settings, explicit


# --- output plumbing ---------------------------------------------------------

def default_out_dir() -> Path:
    return Path(os.environ.get("EXPERTSIM_OUT_DIR", "."))


def _resolve_out(explicit: str | None, default_name: str) -> Path:
    if explicit:
        path = Path(explicit)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path
    out_dir = default_out_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / default_name


def config_slug(cfg: SimConfig) -> str:
    """Short policy tag used in default report file names."""
    prefetch = {
        NONE: "none",
        ORACLE: "oracle",
        TOPK: f"topk{cfg.overfetch:g}",
        SCORE: f"score{cfg.percentile:g}",
    }[cfg.prefetch]
    return f"{cfg.eviction}_{prefetch}_{cfg.miss}_{cfg.routing}".replace(".", "p")


def summary_line(report: dict) -> str:
    rates, timing = report["rates"], report["timing"]
    return (
        f"hit_rate={rates['hit_rate']:.4f} "
        f"collision_rate={rates['collision_rate_demanded']:.4f} "
        f"ttft_us={timing['ttft_us']} "
        f"tokens_per_sec={timing['decode_tokens_per_sec']:.2f}"
    )


# --- subcommands ---------------------------------------------------------

def cmd_gen_trace(args: argparse.Namespace) -> int:
    spec = load_spec_file(args.spec_file) if args.spec_file else builtin_spec(args.model)
    trace = generate_synthetic(
        spec,
        seed=args.seed,
        prefill_tokens=args.prefill,
        decode_tokens=args.decode,
        affinity=args.affinity,
        skew=args.skew,
        drift=args.drift,
        depth_bias=args.depth_bias,
    )
    out = _resolve_out(args.out, f"{spec.name}_seed{args.seed}.trace")
    write_trace(trace, out)
    print(
        f"wrote {out}: {spec.name} L={spec.num_layers} E={spec.experts_per_layer} "
        f"k={spec.top_k}, 1 prefill pass ({args.prefill} tokens) + "
        f"{args.decode} decode passes"
    )
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    trace = read_trace(args.trace)
    settings, explicit = resolve_run_settings(args)
    cfg = build_config(settings, explicit, trace.spec)
    if args.print_config:
        print(json.dumps(cfg.echo(), indent=2))
    report = run_simulation(cfg, trace)
    suffix = "json" if args.format == "json" else "csv"
    out = _resolve_out(
        args.out, f"{Path(args.trace).stem}_{config_slug(cfg)}.{suffix}"
    )
    written = emit(report, args.format, out)
    print(summary_line(report))
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


def _axis_values(args: argparse.Namespace) -> list[tuple[str, list]]:
    """Parse and validate the sweep axes present on the command line."""
    axes: list[tuple[str, list]] = []
    for name, coerce in SWEEP_AXES:
        raw = getattr(args, name)
        if raw is None:
            continue
        values = [v.strip() for v in str(raw).split(",") if v.strip()]
        if not values:
            raise ConfigError(f"--{name} got an empty list")
        try:
            coerced = [coerce(v) for v in values]
        except ValueError:
            raise ConfigError(f"--{name}: bad value in {raw!r}") from None
        for v in coerced:
            if name == "preset" and v not in PRESETS:
                raise ConfigError(
                    f"unknown preset {v!r}; expected one of {', '.join(sorted(PRESETS))}"
                )
            if name == "eviction" and v != ORIGINAL and v not in EVICTION_NAMES:
                raise ConfigError(
                    f"unknown eviction policy {v!r}; expected one of "
                    + ", ".join(EVICTION_NAMES + (ORIGINAL,))
                )
            if name == "prefetch":
                parse_prefetch_token(v)
            if name == "miss":
                parse_miss_token(v)
        axes.append((name, coerced))
    return axes


def _row_settings(
    base: dict,
    base_explicit: set[str],
    scalar_flags: dict,
    assignment: dict[str, object],
) -> tuple[dict, set[str]]:
    settings = dict(base)
    explicit = set(base_explicit)
    preset = assignment.get("preset")
    if preset:
        _merge(settings, PRESETS[str(preset)], explicit)
    _merge(settings, scalar_flags, explicit)
    for key, value in assignment.items():
        if key == "preset":
            continue
        if key == "eviction" and value == ORIGINAL:
            continue
        _merge(settings, {key: value}, explicit)
    return settings, explicit


# Per-process trace cache for sweep workers.
_WORKER_TRACE: Trace | None = None


def _init_worker(trace_path: str) -> None:
    global _WORKER_TRACE
    _WORKER_TRACE = read_trace(trace_path)


def _run_row(cfg: SimConfig) -> dict:
    assert _WORKER_TRACE is not None
    return run_simulation(cfg, _WORKER_TRACE)


def cmd_sweep(args: argparse.Namespace) -> int:
    trace = read_trace(args.trace)
    axes = _axis_values(args)
    axis_names = [name for name, _ in axes]
    total = 1
    for _, values in axes:
        total *= len(values)
    desc = ", ".join(f"{name}x{len(values)}" for name, values in axes) or "none"
    print(f"sweep: {total} run(s); axes: {desc}")
    if total > args.max_runs:
        raise ConfigError(
            f"sweep of {total} runs exceeds the cap of {args.max_runs}; "
            f"raise --max-runs to proceed"
        )

    base = dict(DEFAULTS)
    base_explicit: set[str] = set()
    if args.config:
        _merge(base, load_run_config_file(args.config), base_explicit)
    scalar_flags = flag_overrides(args, skip=_AXIS_KEYS)

    rows: list[dict] = []
    for idx, combo in enumerate(product(*(values for _, values in axes))):
        assignment = dict(zip(axis_names, combo))
        tag = " ".join(f"{k}={v}" for k, v in assignment.items()) or "base"
        row = {"idx": idx, "tag": tag, "cfg": None, "error": None}
        try:
            settings, explicit = _row_settings(
                base, base_explicit, scalar_flags, assignment
            )
            row["cfg"] = build_config(settings, explicit, trace.spec)
        except ConfigError as exc:
            row["error"] = str(exc)
        rows.append(row)
        if row["cfg"] is not None and args.print_config:
            print(f"# run {idx}: {tag}")
            print(json.dumps(row["cfg"].echo(), indent=2))

    jobs = args.jobs or os.cpu_count() or 1
    runnable = [r for r in rows if r["cfg"] is not None]
    reports: dict[int, dict] = {}
    failures: dict[int, str] = {r["idx"]: r["error"] for r in rows if r["error"]}

    if jobs == 1 or len(runnable) <= 1:
        for r in runnable:
            try:
                reports[r["idx"]] = run_simulation(r["cfg"], trace)
            except Exception as exc:  # noqa: BLE001 - isolate row failures
                failures[r["idx"]] = f"{type(exc).__name__}: {exc}"
    else:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_init_worker, initargs=(str(args.trace),)
        ) as pool:
            futures = [(r, pool.submit(_run_row, r["cfg"])) for r in runnable]
            for r, fut in futures:
                try:
                    reports[r["idx"]] = fut.result()
                except Exception as exc:  # noqa: BLE001
                    failures[r["idx"]] = f"{type(exc).__name__}: {exc}"

    out = _resolve_out(args.out, f"{Path(args.trace).stem}_sweep.csv")
    written = 0
    for r in rows:
        idx = r["idx"]
        if idx in reports:
            emit(reports[idx], "csv", out)
            written += 1
            print(f"[{idx:3d}] {r['tag']}: {summary_line(reports[idx])}")
        else:
            print(f"[{idx:3d}] {r['tag']}: FAILED: {failures[idx]}", file=sys.stderr)
    print(f"wrote {out} ({written} of {len(rows)} runs)")
    return 0 if not failures else 1


# --- parser ----------------------------------------------------------------

def _add_scalar_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("simulation settings")
    g.add_argument("--config", metavar="PATH",
                   help="key = value settings file applied over the defaults")
    g.add_argument("--working", choices=PRECISION_ORDER,
                   help="working precision experts are fetched at (default fp16)")
    g.add_argument("--routing", choices=(STANDARD, CACHE_AWARE),
                   help="routing policy (default standard)")
    g.add_argument("--sb-decay", type=float, metavar="D",
                   help="per-pass decay of sb eviction signals (default 0.9)")
    g.add_argument("--prefetch-noise", type=float, metavar="P",
                   help="probability a predicted expert is swapped for a random "
                        "one (default 0)")
    g.add_argument("--degrade-percentile", type=float, metavar="P",
                   help="fetch_priority score percentile below which the fetch "
                        "starts one level lower (default 60)")
    g.add_argument("--capacity-bytes", type=_as_int, metavar="N",
                   help="cache capacity in bytes (replaces the fraction)")
    g.add_argument("--compute-us", type=_as_int, metavar="US",
                   help="per-layer compute time in microseconds (default 2000)")
    g.add_argument("--seed", type=_as_int, metavar="N",
                   help="simulation rng seed (default 0)")
    g.add_argument("--precisions", metavar="LIST",
                   help="comma-separated precision ladder override, e.g. "
                        "'int8,int4,int2'")


def _add_policy_flags(p: argparse.ArgumentParser, sweep: bool) -> None:
    axis = " (comma-separated values sweep an axis)" if sweep else ""
    g = p.add_argument_group("policy axes" if sweep else "policy")
    if sweep:
        g.add_argument("--preset", metavar="LIST",
                       help="named baseline stack(s): "
                            + ", ".join(sorted(PRESETS)) + axis)
    else:
        g.add_argument("--preset", choices=sorted(PRESETS),
                       help="named baseline stack applied before flags")
    g.add_argument("--eviction", metavar="NAME",
                   help="eviction policy: " + ", ".join(EVICTION_NAMES)
                        + (", original" if sweep else "") + axis)
    g.add_argument("--prefetch", metavar="TOKEN",
                   help="none, oracle, topk[:OVERFETCH], score[:PERCENTILE]" + axis)
    g.add_argument("--miss", metavar="TOKEN",
                   help="fetch, fetch_low, fetch_priority, drop[:RANK], "
                        "subst[:TOLERANCE]" + axis)
    g.add_argument("--lam", metavar="L", **({"type": float} if not sweep else {}),
                   help="cache-aware routing bias strength (default 0.3)" + axis)
    g.add_argument("--capacity", metavar="F",
                   **({"type": float} if not sweep else {}),
                   help="cache capacity as a fraction of the working-precision "
                        "expert store (default 0.05)" + axis)
    g.add_argument("--bandwidth", metavar="BPS",
                   **({"type": _as_int} if not sweep else {}),
                   help="link bandwidth in bytes/s; 0 means infinitely fast "
                        "(default 5e9)" + axis)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="expertsim",
        description="Trace-driven cache simulator for MoE expert offloading.",
        epilog="EXPERTSIM_OUT_DIR sets the default output directory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trace", help="generate a synthetic routing trace")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="built-in model geometry name")
    src.add_argument("--spec-file", metavar="PATH",
                     help="model geometry from a key = value file")
    g.add_argument("--seed", type=_as_int, default=0, help="generator seed")
    g.add_argument("--prefill", type=_as_int, required=True, metavar="TOKENS",
                   help="tokens in the single prefill pass")
    g.add_argument("--decode", type=_as_int, required=True, metavar="PASSES",
                   help="number of single-token decode passes")
    g.add_argument("--affinity", type=float, default=0.6,
                   help="pass-to-pass routing correlation in [0, 1] (default 0.6)")
    g.add_argument("--skew", type=float, default=1.0,
                   help="spread of per-expert base popularity (default 1.0)")
    g.add_argument("--drift", type=float, default=0.0,
                   help="per-pass random walk of the base popularity (default 0)")
    g.add_argument("--depth-bias", type=float, default=0.0,
                   help="strength of depth-dependent score scaling (default 0)")
    g.add_argument("--out", metavar="PATH", help="output trace path")
    g.set_defaults(func=cmd_gen_trace)

    r = sub.add_parser("run", help="simulate one config over a trace")
    r.add_argument("--trace", required=True, metavar="PATH", help="input trace file")
    _add_policy_flags(r, sweep=False)
    _add_scalar_flags(r)
    r.add_argument("--out", metavar="PATH", help="report output path")
    r.add_argument("--format", choices=("json", "csv"), default="json",
                   help="full report (json) or one flat appended row (csv)")
    r.add_argument("--print-config", action="store_true",
                   help="echo the fully resolved config before running")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a Cartesian product of configs")
    s.add_argument("--trace", required=True, metavar="PATH", help="input trace file")
    _add_policy_flags(s, sweep=True)
    _add_scalar_flags(s)
    s.add_argument("--out", metavar="PATH", help="flat csv output path (appended)")
    s.add_argument("--max-runs", type=_as_int, default=512, metavar="N",
                   help="refuse sweeps larger than this many runs (default 512)")
    s.add_argument("--jobs", type=_as_int, default=None, metavar="N",
                   help="parallel worker processes (default: cpu count)")
    s.add_argument("--print-config", action="store_true",
                   help="echo every resolved row config before running")
    s.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
