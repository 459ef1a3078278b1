"""Roofline-style step costs for adapter-augmented serving.

Closed forms used throughout (documented here so the numbers in reports can
be reproduced by hand):

* dense parameter count of a decoder shape:
  params_total = n_layers * (4 * d^2 + 3 * d * ffn_dim)
* base step: flops = 2 * params_total * tokens + 2 * kv_pairs * d * n_layers,
  bytes = params_total * bytes_per_param (weights stream once per step)
  + 2 * kv_pairs * d * bytes_per_param * n_layers (K and V rows read).
  kv_pairs counts (query token, visible key position) pairs; for decode
  batches it equals the summed cache lengths, for chunked prefill it is an
  upper bound on the pages actually re-read.
* adapter op per hook site: a rank-r adapter touching width d costs
  2 * site_params * tokens flops per token routed to it, and per distinct
  adapter in the step: site_params * bytes_per_param of weight traffic,
  2 * step_tokens * d * bytes_per_param of gather/scatter activation
  traffic (the masked pass scans the whole batch), plus a fixed dispatch
  latency adapter_op_overhead_s, modelled as the equivalent HBM bytes.
  site_params is 2 * r * d for low-rank sites (square-projection
  approximation) and 2 * r * d + r for subspace sites.
* step_time = max(flops / peak_flops, hbm_bytes / hbm_bandwidth); paging
  transfers are serialized and cost bytes / link_bandwidth.

The dispatch-latency term is what makes many-adapter decode slow in
practice: rank-8 tensors are only megabytes, so separate small kernel
launches per (adapter, site), not raw bandwidth, dominate the measured
overhead on real engines. Adapters scheduled only for prompt positions
contribute exactly zero decode-step cost.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .adapters import AdapterKind, PositionSchedule
from .errors import ConfigError, DomainError
from .model import Phase

__all__ = [
    "HardwareProfile",
    "ModelShape",
    "StepCost",
    "H100_PROFILE",
    "SHAPE_8B",
    "SHAPE_70B",
    "lora_down_intensity",
    "is_compute_bound",
    "site_params",
    "adapter_total_params",
    "base_step_cost",
    "adapter_step_cost",
    "combine_costs",
    "step_time",
    "paging_time",
    "load_hardware_profile",
    "load_model_shape",
]


@dataclass(frozen=True)
class HardwareProfile:
    """Device characteristics the cost model needs.

    ridge is the arithmetic intensity (flop per byte) at which the device
    stops being memory bound; it must agree with peak_flops / hbm_bandwidth
    up to documentation rounding. adapter_op_overhead_s is the fixed
    dispatch plus synchronisation latency charged per (distinct adapter,
    hook site) pass in a step.
    """

    peak_flops: float
    hbm_bandwidth: float
    link_bandwidth: float
    bytes_per_param: int
    ridge: float
    adapter_op_overhead_s: float = 8e-6

    def __post_init__(self) -> None:
        for name in ("peak_flops", "hbm_bandwidth", "link_bandwidth", "ridge"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.bytes_per_param < 1:
            raise ConfigError("bytes_per_param must be >= 1")
        if self.adapter_op_overhead_s < 0:
            raise ConfigError("adapter_op_overhead_s must be >= 0")
        implied = self.peak_flops / self.hbm_bandwidth
        if abs(self.ridge - implied) / implied > 0.05:
            raise ConfigError(
                f"ridge {self.ridge} is inconsistent with peak/bandwidth {implied:.1f}"
            )


@dataclass(frozen=True)
class ModelShape:
    """Dense decoder shape; parameter count follows from the closed form."""

    d_model: int
    n_layers: int
    ffn_dim: int

    def __post_init__(self) -> None:
        if min(self.d_model, self.n_layers, self.ffn_dim) < 1:
            raise ConfigError("model shape dimensions must be positive")

    @property
    def params_total(self) -> int:
        d = self.d_model
        return self.n_layers * (4 * d * d + 3 * d * self.ffn_dim)


@dataclass(frozen=True)
class StepCost:
    flops: float
    hbm_bytes: float
    phase: Phase

    def __post_init__(self) -> None:
        if self.flops < 0 or self.hbm_bytes < 0:
            raise DomainError("costs must be non-negative")


# a single H100-class accelerator over PCIe, half-precision weights
H100_PROFILE = HardwareProfile(
    peak_flops=989e12,
    hbm_bandwidth=3.35e12,
    link_bandwidth=32e9,
    bytes_per_param=2,
    ridge=295.0,
)

SHAPE_8B = ModelShape(d_model=4096, n_layers=32, ffn_dim=14336)
SHAPE_70B = ModelShape(d_model=8192, n_layers=80, ffn_dim=28672)


def lora_down_intensity(batch: int, d: int, rank: int) -> float:
    """Arithmetic intensity of a rank-r down projection on a batch of b rows.

    flops = 2 * b * d * r and half-precision traffic 2 * (b*d + d*r + b*r)
    bytes reduce to the harmonic form 1 / (1/r + 1/b + 1/d), which is
    bounded above by min(r, b, d) and therefore sits far below the ridge of
    current accelerators for realistic adapter ranks.
    """
    if min(batch, d, rank) < 1:
        raise DomainError("batch, d and rank must all be >= 1")
    return 1.0 / (1.0 / rank + 1.0 / batch + 1.0 / d)


def is_compute_bound(cost_or_intensity: StepCost | float, hw: HardwareProfile) -> bool:
    """Classify against the profile's ridge. Accepts a StepCost or raw intensity."""
    if isinstance(cost_or_intensity, StepCost):
        if cost_or_intensity.hbm_bytes == 0:
            return True
        intensity = cost_or_intensity.flops / cost_or_intensity.hbm_bytes
    else:
        intensity = float(cost_or_intensity)
    return intensity >= hw.ridge


def site_params(kind: AdapterKind, rank: int, d: int) -> int:
    """Parameter count of one hook site of width d."""
    if rank < 1 or d < 1:
        raise DomainError("rank and d must be >= 1")
    if kind is AdapterKind.LORA:
        return 2 * rank * d
    return 2 * rank * d + rank


def adapter_total_params(kind: AdapterKind, rank: int, shape: ModelShape) -> int:
    """Whole-model parameter count of one adapter.

    Subspace adapters hook the residual stream once per layer. Low-rank
    adapters wrap the four attention projections plus the three MLP
    projections, whose rectangular sites cost rank * (n + m) each.
    """
    d, f = shape.d_model, shape.ffn_dim
    if kind is AdapterKind.LORA:
        per_layer = 4 * rank * 2 * d + 3 * rank * (d + f)
    else:
        per_layer = 2 * rank * d + rank
    return shape.n_layers * per_layer


def base_step_cost(
    shape: ModelShape,
    phase: Phase,
    tokens_in_step: int,
    kv_pairs: int,
    hw: HardwareProfile,
) -> StepCost:
    """Cost of the dense model for one engine step (closed forms above)."""
    if tokens_in_step < 1:
        raise DomainError("a step must process at least one token")
    if kv_pairs < 0:
        raise DomainError("kv_pairs must be >= 0")
    d = shape.d_model
    flops = 2.0 * shape.params_total * tokens_in_step + 2.0 * kv_pairs * d * shape.n_layers
    bytes_ = (
        float(shape.params_total) * hw.bytes_per_param
        + 2.0 * kv_pairs * d * hw.bytes_per_param * shape.n_layers
    )
    return StepCost(flops, bytes_, phase)


def adapter_step_cost(
    kind: AdapterKind,
    rank: int,
    d: int,
    schedule: PositionSchedule,
    phase: Phase,
    distinct_adapters_in_batch: int,
    tokens_per_adapter: int | Sequence[int],
    hw: HardwareProfile,
    sites: int = 1,
) -> StepCost:
    """Cost of running every adapter pass of one step at one site group.

    sites multiplies the single-site cost; pass n_layers for an adapter
    hooked at every layer. Prompt-only adapters at a decode step cost
    exactly nothing: no flops, no bytes, no dispatches.
    """
    if distinct_adapters_in_batch < 0:
        raise DomainError("distinct adapter count must be >= 0")
    if sites < 1:
        raise DomainError("sites must be >= 1")
    if schedule is PositionSchedule.PREFILL_ONLY and phase is Phase.DECODE:
        return StepCost(0.0, 0.0, phase)
    if distinct_adapters_in_batch == 0:
        return StepCost(0.0, 0.0, phase)
    if isinstance(tokens_per_adapter, int):
        tokens = [tokens_per_adapter] * distinct_adapters_in_batch
    else:
        tokens = list(tokens_per_adapter)
        if len(tokens) != distinct_adapters_in_batch:
            raise DomainError("need one token count per distinct adapter")
    if any(t < 1 for t in tokens):
        raise DomainError("every scheduled adapter must receive tokens")
    params = site_params(kind, rank, d)
    step_tokens = sum(tokens)
    flops = 2.0 * params * step_tokens * sites
    per_adapter_bytes = (
        params * hw.bytes_per_param
        + 2.0 * step_tokens * d * hw.bytes_per_param
        + hw.adapter_op_overhead_s * hw.hbm_bandwidth
    )
    return StepCost(flops, distinct_adapters_in_batch * per_adapter_bytes * sites, phase)


def combine_costs(*costs: StepCost) -> StepCost:
    if not costs:
        raise DomainError("need at least one cost to combine")
    return StepCost(
        sum(c.flops for c in costs),
        sum(c.hbm_bytes for c in costs),
        costs[0].phase,
    )


def step_time(cost: StepCost, hw: HardwareProfile) -> float:
    """Roofline time: whichever of compute and memory traffic binds."""
    return max(cost.flops / hw.peak_flops, cost.hbm_bytes / hw.hbm_bandwidth)


def paging_time(n_bytes: float, hw: HardwareProfile) -> float:
    """Host-device transfer time; transfers never overlap compute."""
    if n_bytes < 0:
        raise DomainError("transfer size must be >= 0")
    return n_bytes / hw.link_bandwidth


# ------------------------------------------------------------- config io


def _section(parser: configparser.ConfigParser, name: str, path) -> configparser.SectionProxy:
    if name not in parser:
        raise ConfigError(f"{path} has no [{name}] section")
    return parser[name]


def _get_float(section, key, path) -> float:
    if key not in section:
        raise ConfigError(f"{path}: missing key {key}")
    try:
        return float(section[key])
    except ValueError as exc:
        raise ConfigError(f"{path}: {key} is not a number") from exc


def load_hardware_profile(path: str | Path) -> HardwareProfile:
    """Read a [hardware] section; units are FLOP/s, B/s, bytes and seconds."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    sec = _section(parser, "hardware", path)
    return HardwareProfile(
        peak_flops=_get_float(sec, "peak_flops", path),
        hbm_bandwidth=_get_float(sec, "hbm_bandwidth", path),
        link_bandwidth=_get_float(sec, "link_bandwidth", path),
        bytes_per_param=int(_get_float(sec, "bytes_per_param", path)),
        ridge=_get_float(sec, "ridge", path),
        adapter_op_overhead_s=float(sec.get("adapter_op_overhead_s", "8e-6")),
    )


def load_model_shape(path: str | Path) -> ModelShape:
    """Read a [model] section with d_model, n_layers and ffn_dim."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    sec = _section(parser, "model", path)
    return ModelShape(
        d_model=int(_get_float(sec, "d_model", path)),
        n_layers=int(_get_float(sec, "n_layers", path)),
        ffn_dim=int(_get_float(sec, "ffn_dim", path)),
    )
