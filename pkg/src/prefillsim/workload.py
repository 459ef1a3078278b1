"""Synthetic request workloads: lengths, adapter assignment, serialization.

Prompt lengths follow a shifted lognormal, rounded half-to-even and clipped
into [1, l_max - 2]:

    p = round(loc + scale * exp(sigma * z)),  z ~ N(0, 1)

with sigma = 0.8, loc = -1.0, scale = 18.0 (pre-clip mean
loc + scale * exp(sigma^2 / 2), about 23.8). The total length is uniform on
[p + 2, l_max], so every request generates at least two tokens.

Adapter ids come from one of four mixes: identical (everyone shares id 0),
uniform (iid over ids), skewed (Zipf with exponent 1.0, mass proportional
to 1 / (id + 1)), and distinct (round-robin i mod N, then a seeded
shuffle). Each sampler draws from its own named sub-stream of the master
seed, so changing the mix never disturbs the sampled lengths.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .linalg import rng_from_seed

__all__ = [
    "PROMPT_SIGMA",
    "PROMPT_LOC",
    "PROMPT_SCALE",
    "AdapterMix",
    "WorkloadConfig",
    "RequestSpec",
    "analytic_prompt_mean",
    "sample_prompt_lens",
    "sample_total_lens",
    "assign_adapters",
    "generate_workload",
    "dump_workload",
    "load_workload",
]

PROMPT_SIGMA = 0.8
PROMPT_LOC = -1.0
PROMPT_SCALE = 18.0

# named sub-streams of the master seed, one per sampler
_STREAM_PROMPT = 1
_STREAM_TOTAL = 2
_STREAM_ADAPTER = 3
_STREAM_SHUFFLE = 4


class AdapterMix(enum.Enum):
    IDENTICAL = "identical"
    UNIFORM = "uniform"
    SKEWED = "skewed"
    DISTINCT = "distinct"


@dataclass(frozen=True)
class WorkloadConfig:
    n_requests: int
    n_adapters: int
    mix: AdapterMix
    seed: int
    l_max: int = 2048

    def __post_init__(self) -> None:
        if self.n_requests < 0:
            raise ConfigError(f"n_requests must be >= 0, got {self.n_requests}")
        if self.n_adapters < 0:
            raise ConfigError(f"n_adapters must be >= 0, got {self.n_adapters}")
        if self.l_max < 4:
            raise ConfigError(f"l_max must be >= 4, got {self.l_max}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass(frozen=True)
class RequestSpec:
    """One request: prompt length, required output length, and the adapter
    that serves it (None for the base model)."""

    request_id: int
    prompt_len: int
    output_len: int
    adapter_id: int | None

    def __post_init__(self) -> None:
        if self.prompt_len < 1:
            raise DomainError("prompt_len must be >= 1")
        if self.output_len < 2:
            raise DomainError("output_len must be >= 2")

    @property
    def total_len(self) -> int:
        return self.prompt_len + self.output_len


def analytic_prompt_mean() -> float:
    """Mean of the pre-clip prompt-length distribution."""
    return PROMPT_LOC + PROMPT_SCALE * float(np.exp(PROMPT_SIGMA**2 / 2.0))


def sample_prompt_lens(cfg: WorkloadConfig, size: int | None = None) -> np.ndarray:
    """Draw prompt lengths for the workload's prompt sub-stream."""
    n = cfg.n_requests if size is None else size
    rng = rng_from_seed(cfg.seed, _STREAM_PROMPT)
    z = rng.normal(size=n)
    raw = PROMPT_LOC + PROMPT_SCALE * np.exp(PROMPT_SIGMA * z)
    return np.clip(np.rint(raw), 1, cfg.l_max - 2).astype(np.int64)


def sample_total_lens(cfg: WorkloadConfig, prompt_lens: np.ndarray) -> np.ndarray:
    """Draw total lengths uniformly on [p + 2, l_max] per request."""
    prompt_lens = np.asarray(prompt_lens, dtype=np.int64)
    if np.any(prompt_lens > cfg.l_max - 2):
        raise DomainError("prompt length leaves no room for two output tokens")
    rng = rng_from_seed(cfg.seed, _STREAM_TOTAL)
    return rng.integers(prompt_lens + 2, cfg.l_max + 1)


def assign_adapters(cfg: WorkloadConfig) -> list[int | None]:
    """Adapter id per request according to the configured mix."""
    n, n_adapters = cfg.n_requests, cfg.n_adapters
    if n_adapters == 0:
        return [None] * n
    if cfg.mix is AdapterMix.IDENTICAL:
        ids = np.zeros(n, dtype=np.int64)
    elif cfg.mix is AdapterMix.UNIFORM:
        ids = rng_from_seed(cfg.seed, _STREAM_ADAPTER).integers(0, n_adapters, size=n)
    elif cfg.mix is AdapterMix.SKEWED:
        weights = 1.0 / (np.arange(n_adapters, dtype=np.float64) + 1.0)
        probs = weights / weights.sum()
        ids = rng_from_seed(cfg.seed, _STREAM_ADAPTER).choice(n_adapters, size=n, p=probs)
    else:
        ids = np.arange(n, dtype=np.int64) % n_adapters
        perm = rng_from_seed(cfg.seed, _STREAM_SHUFFLE).permutation(n)
        ids = ids[perm]
    return [int(i) for i in ids]


def generate_workload(cfg: WorkloadConfig) -> list[RequestSpec]:
    """Build the full request list. Deterministic in cfg.seed."""
    prompts = sample_prompt_lens(cfg)
    totals = sample_total_lens(cfg, prompts)
    adapters = assign_adapters(cfg)
    return [
        RequestSpec(i, int(p), int(t - p), a)
        for i, (p, t, a) in enumerate(zip(prompts, totals, adapters))
    ]


def dump_workload(specs: Sequence[RequestSpec], path: str | Path) -> None:
    """Write requests as comma-separated text with a header row."""
    lines = ["request_id,prompt_len,output_len,adapter_id"]
    for s in specs:
        adapter = "" if s.adapter_id is None else str(s.adapter_id)
        lines.append(f"{s.request_id},{s.prompt_len},{s.output_len},{adapter}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_workload(path: str | Path) -> list[RequestSpec]:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0] != "request_id,prompt_len,output_len,adapter_id":
        raise ConfigError(f"{path} is not a workload dump")
    out = []
    for line in text[1:]:
        rid, p, o, a = line.split(",")
        out.append(RequestSpec(int(rid), int(p), int(o), int(a) if a else None))
    return out
