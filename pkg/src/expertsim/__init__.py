"""Trace-driven cache simulation for Mixture-of-Experts expert offloading.

The package simulates an expert cache in front of slow weight storage:
routing decisions come from a trace, and cache capacity, link bandwidth,
and per-layer compute are emulated with a deterministic microsecond clock.
Policies for routing bias, prefetching, eviction, and miss handling plug
into one engine so their combinations can be compared on equal footing.
"""

from .engine import SimConfig, Simulation, run_simulation
from .metrics import build_report, emit, flatten_report, replay_report
from .models import (
    BUILTIN_SPECS,
    ConfigError,
    ExpertKey,
    HardwareSpec,
    ModelSpec,
    builtin_spec,
    load_spec_file,
    resolve_capacity,
    transfer_us,
)
from .trace import (
    ForwardPass,
    LayerEvent,
    Trace,
    TraceFormatError,
    generate_synthetic,
    read_trace,
    write_trace,
)

__version__ = "0.1.0"

__all__ = [
    "BUILTIN_SPECS",
    "ConfigError",
    "ExpertKey",
    "ForwardPass",
    "HardwareSpec",
    "LayerEvent",
    "ModelSpec",
    "SimConfig",
    "Simulation",
    "Trace",
    "TraceFormatError",
    "build_report",
    "builtin_spec",
    "emit",
    "flatten_report",
    "generate_synthetic",
    "load_spec_file",
    "read_trace",
    "replay_report",
    "resolve_capacity",
    "run_simulation",
    "transfer_us",
    "write_trace",
]
