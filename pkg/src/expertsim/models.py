"""Model geometry, precision levels, and cache-capacity arithmetic.

Byte sizes are decimal throughout (1 MB = 10**6 bytes). The capacity
fraction is taken of the expert store at the working precision, so the
same fraction holds the same number of experts at any precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

MB = 10**6
GB = 10**9

# Precision level -> fraction of the fp16 byte size. Order matters: entries
# run from largest to smallest, and "highest available precision" means the
# earliest entry of this table present in a spec's precision list.
PRECISION_SIZE_FACTOR: dict[str, float] = {
    "fp16": 1.0,
    "int8": 0.5,
    "int4": 0.25,
    "int2": 0.125,
}

PRECISION_ORDER: tuple[str, ...] = tuple(PRECISION_SIZE_FACTOR)


class ConfigError(ValueError):
    """Raised for invalid model, hardware, or simulation configuration."""


class ExpertKey(NamedTuple):
    """A concrete cached copy of an expert: identity plus precision."""

    layer: int
    expert: int
    precision: str

    @property
    def ident(self) -> tuple[int, int]:
        return (self.layer, self.expert)


def _check_precision(name: str) -> str:
    if name not in PRECISION_SIZE_FACTOR:
        raise ConfigError(
            f"unknown precision {name!r}; expected one of {', '.join(PRECISION_ORDER)}"
        )
    return name


def sort_precisions(names: tuple[str, ...] | list[str]) -> tuple[str, ...]:
    """Return precision names ordered largest to smallest."""
    for n in names:
        _check_precision(n)
    return tuple(sorted(set(names), key=PRECISION_ORDER.index))


@dataclass(frozen=True)
class ModelSpec:
    """Static geometry of one MoE model's expert store.

    Attributes:
        name: Identifier echoed in traces and reports.
        num_layers: Number of MoE layers (L).
        experts_per_layer: Experts per layer (E).
        top_k: Experts selected per token per layer (k).
        expert_bytes_fp16: Size of one expert's weights at fp16, in bytes.
        precisions: Precision levels this run may fetch, largest first.
    """

    name: str
    num_layers: int
    experts_per_layer: int
    top_k: int
    expert_bytes_fp16: int
    precisions: tuple[str, ...] = PRECISION_ORDER

    def __post_init__(self) -> None:
        if self.num_layers <= 0 or self.experts_per_layer <= 0:
            raise ConfigError("num_layers and experts_per_layer must be positive")
        if not (1 <= self.top_k <= self.experts_per_layer):
            raise ConfigError(
                f"top_k must be in [1, {self.experts_per_layer}], got {self.top_k}"
            )
        if self.expert_bytes_fp16 <= 0:
            raise ConfigError("expert_bytes_fp16 must be positive")
        if not self.precisions:
            raise ConfigError("precisions must not be empty")
        object.__setattr__(self, "precisions", sort_precisions(self.precisions))

    @property
    def highest_precision(self) -> str:
        return self.precisions[0]

    @property
    def lowest_precision(self) -> str:
        return self.precisions[-1]

    def expert_bytes(self, precision: str) -> int:
        """Bytes one expert occupies at `precision`."""
        _check_precision(precision)
        if precision not in self.precisions:
            raise ConfigError(
                f"precision {precision!r} not available for model {self.name!r}"
            )
        return math.floor(self.expert_bytes_fp16 * PRECISION_SIZE_FACTOR[precision])

    def store_bytes(self, precision: str) -> int:
        """Bytes of the full expert store (all layers, all experts) at `precision`."""
        return self.num_layers * self.experts_per_layer * self.expert_bytes(precision)


@dataclass(frozen=True)
class HardwareSpec:
    """Cache capacity and link characteristics for a run.

    Exactly one of capacity_fraction / capacity_bytes must be set.
    bandwidth_bytes_per_sec = 0 is an explicit sentinel for an infinitely
    fast link (transfer time 0), used by tests that isolate cache effects.
    """

    capacity_fraction: float | None = None
    capacity_bytes: int | None = None
    bandwidth_bytes_per_sec: int = 5 * GB
    per_layer_compute_us: int = 2000

    def __post_init__(self) -> None:
        if (self.capacity_fraction is None) == (self.capacity_bytes is None):
            raise ConfigError(
                "set exactly one of capacity_fraction or capacity_bytes"
            )
        if self.capacity_fraction is not None and not (
            0.0 < self.capacity_fraction <= 1.0
        ):
            raise ConfigError("capacity_fraction must be in (0, 1]")
        if self.capacity_bytes is not None and self.capacity_bytes <= 0:
            raise ConfigError("capacity_bytes must be positive")
        if self.bandwidth_bytes_per_sec < 0:
            raise ConfigError("bandwidth_bytes_per_sec must be >= 0 (0 = infinite)")
        if self.per_layer_compute_us < 0:
            raise ConfigError("per_layer_compute_us must be >= 0")


def resolve_capacity(spec: ModelSpec, hw: HardwareSpec, working_precision: str) -> int:
    """Resolve the configured capacity to a byte budget.

    A fraction is interpreted against the expert store at the working
    precision: floor(fraction * L * E * expert_bytes). The resolved budget
    must hold at least one expert at the smallest available precision.
    """
    if hw.capacity_bytes is not None:
        capacity = hw.capacity_bytes
    else:
        capacity = math.floor(hw.capacity_fraction * spec.store_bytes(working_precision))
    floor_bytes = spec.expert_bytes(spec.lowest_precision)
    if capacity < floor_bytes:
        raise ConfigError(
            f"resolved capacity {capacity} B cannot hold one "
            f"{spec.lowest_precision} expert ({floor_bytes} B)"
        )
    return capacity


def transfer_us(nbytes: int, bandwidth_bytes_per_sec: int) -> int:
    """Whole-microsecond transfer time for `nbytes` over the link."""
    if nbytes < 0:
        raise ValueError("nbytes must be >= 0")
    if bandwidth_bytes_per_sec == 0 or nbytes == 0:
        return 0
    return -(-nbytes * 10**6 // bandwidth_bytes_per_sec)  # ceil division


BUILTIN_SPECS: dict[str, ModelSpec] = {
    "olmoe": ModelSpec("olmoe", num_layers=16, experts_per_layer=64, top_k=8,
                       expert_bytes_fp16=12 * MB),
    "mixtral": ModelSpec("mixtral", num_layers=32, experts_per_layer=8, top_k=2,
                         expert_bytes_fp16=336 * MB),
    "qwen15moe": ModelSpec("qwen15moe", num_layers=24, experts_per_layer=60, top_k=4,
                           expert_bytes_fp16=int(16.5 * MB)),
    "phi35moe": ModelSpec("phi35moe", num_layers=32, experts_per_layer=16, top_k=2,
                          expert_bytes_fp16=150 * MB),
}


def builtin_spec(name: str) -> ModelSpec:
    try:
        return BUILTIN_SPECS[name]
    except KeyError:
        raise ConfigError(
            f"unknown model {name!r}; built-ins: {', '.join(sorted(BUILTIN_SPECS))}"
        ) from None


_SPEC_FILE_KEYS = {
    "name": str,
    "num_layers": int,
    "experts_per_layer": int,
    "top_k": int,
    "expert_bytes_fp16": int,
    "precisions": str,
}


def load_spec_file(path: str | Path) -> ModelSpec:
    """Load a ModelSpec from a plain `key = value` text file.

    Blank lines and lines starting with '#' are ignored. `precisions` is a
    comma-separated list; all other values are scalars. Unknown keys and
    missing required keys raise ConfigError naming the offender.
    """
    path = Path(path)
    values: dict[str, object] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SPEC_FILE_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        caster = _SPEC_FILE_KEYS[key]
        try:
            values[key] = caster(value)
        except ValueError:
            raise ConfigError(
                f"{path}:{lineno}: bad value {value!r} for {key!r}"
            ) from None
    missing = [k for k in _SPEC_FILE_KEYS if k not in values and k != "precisions"]
    if missing:
        raise ConfigError(f"{path}: missing required keys: {', '.join(missing)}")
    if "precisions" in values:
        values["precisions"] = tuple(
            p.strip() for p in str(values["precisions"]).split(",") if p.strip()
        )
    return ModelSpec(**values)  # type: ignore[arg-type]
