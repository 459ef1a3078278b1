"""Step-driven simulator for serving many adapters on one device.

Scheduling model, in the order applied every step:

1. Admission. Requests arrive in list order at time zero and join the
   running set first-come first-served whenever a slot is free, up to
   max_batch slots.
2. Batch formation. Running decode requests are scheduled first, one token
   each, then prefill requests receive chunks from the remaining token
   budget (chunk_size caps a single request's chunk; None means as much as
   fits). A request whose adapter would push the step's set of executing
   adapters past max_gpu_adapters is deferred to a later step, never
   reordered. Adapters scheduled for prompt positions only do not execute
   at decode steps and so neither occupy the adapter budget nor require
   residency there.
3. Paging. Every adapter executing this step must be device-resident
   before compute. Missing ones stream over the host link, least recently
   used residents are evicted first (never one needed this step), and the
   serialized transfer time is added to the step. Evictions are free: the
   host keeps the master copy.
4. Compute. Cost mode prices the step with the roofline model; functional
   mode runs the toy transformer and measures wall time.
5. Token accounting. A prefill step only fills the cache: the request
   starts decoding the step after its last prompt chunk. Decode step k of
   a request appends and emits output token k, so a request with prompt p
   and n output tokens served with whole-prompt chunks takes exactly
   1 + n steps. Slots free at the end of the finishing step.
6. Weight sync. Updates queued for step i apply atomically after step i
   completes; the step itself always sees the catalogue as it stood at the
   boundary before it. All updates for a boundary are validated before any
   is applied.
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import AdapterKind, PositionSchedule, ScalingRule
from .costmodel import (
    H100_PROFILE,
    SHAPE_8B,
    HardwareProfile,
    ModelShape,
    adapter_step_cost,
    adapter_total_params,
    base_step_cost,
    combine_costs,
    paging_time,
    step_time,
)
from .errors import ConfigError, InfeasibleBatchError, StateError, SyncError
from .linalg import rng_from_seed
from .metrics import MetricsReport, RequestTiming, aggregate
from .model import (
    KvCache,
    ModelAdapter,
    ModelConfig,
    ModelWeights,
    Phase,
    SeqEntry,
    build_adapter,
    build_model,
    forward_chunk,
    make_batch,
    perturb_adapter,
)
from .workload import RequestSpec

__all__ = [
    "EngineMode",
    "EngineConfig",
    "AdapterSetup",
    "WeightSync",
    "StepRecord",
    "TraceEvent",
    "AdapterPool",
    "EngineResult",
    "Engine",
    "simulate",
]

_PROMPT_STREAM_BASE = 10_000


def _adapter_seed(seed: int, adapter_id: int) -> int:
    return int(np.random.SeedSequence((seed, 20_000 + adapter_id)).generate_state(1)[0])


class EngineMode:
    COST = "cost"
    FUNCTIONAL = "functional"


@dataclass(frozen=True)
class EngineConfig:
    mode: str = EngineMode.COST
    max_batch: int = 32
    max_gpu_adapters: int = 32
    max_host_adapters: int | None = None
    chunk_size: int | None = None
    step_token_budget: int = 2048
    seed: int = 0
    warmup: bool = True
    hardware: HardwareProfile = H100_PROFILE
    shape: ModelShape = SHAPE_8B
    model: ModelConfig | None = None

    def __post_init__(self) -> None:
        if self.mode not in (EngineMode.COST, EngineMode.FUNCTIONAL):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.max_batch < 1:
            raise ConfigError("max_batch must be >= 1")
        if self.max_gpu_adapters < 1:
            raise ConfigError("max_gpu_adapters must be >= 1")
        if self.max_host_adapters is not None and self.max_host_adapters < self.max_gpu_adapters:
            raise ConfigError("max_host_adapters must be >= max_gpu_adapters")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if self.step_token_budget < self.max_batch:
            raise ConfigError("step_token_budget must cover one decode token per slot")
        if self.mode == EngineMode.FUNCTIONAL:
            if self.model is None:
                raise ConfigError("functional mode needs a model configuration")
            # real forwards are for semantics checks on tiny models; big
            # shapes belong to the cost model
            if self.model.d_model > 64:
                raise ConfigError("functional mode is limited to d_model <= 64")


@dataclass(frozen=True)
class AdapterSetup:
    """Uniform description of the adapters a run serves."""

    kind: AdapterKind = AdapterKind.DIREFT
    rank: int = 8
    schedule: PositionSchedule = PositionSchedule.ALL_POSITIONS
    scaling: ScalingRule | None = None
    perturb_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.perturb_sigma < 0:
            raise ConfigError("perturb_sigma must be >= 0")


@dataclass(frozen=True)
class WeightSync:
    """Replace an adapter's weights after step `step` completes."""

    step: int
    adapter_id: int
    payload: ModelAdapter | None = None

    def __post_init__(self) -> None:
        if self.step < 0:
            raise ConfigError("sync step must be >= 0")


@dataclass(frozen=True)
class TraceEvent:
    kind: str
    step: int
    clock: float
    request_id: int | None
    adapter_id: int | None
    tokens: int


@dataclass(frozen=True)
class StepRecord:
    index: int
    t_start: float
    t_end: float
    compute_s: float
    paging_s: float
    prefill_tokens: int
    decode_tokens: int
    kv_pairs: int
    flops: float
    hbm_bytes: float
    adapter_decode_flops: float
    adapter_decode_bytes: float
    scheduled: tuple[int, ...]
    workset: tuple[int, ...]
    resident: tuple[int, ...]
    paged_in: tuple[int, ...]

    @property
    def seconds(self) -> float:
        return self.compute_s + self.paging_s


class AdapterPool:
    """Device-side adapter slots with least-recently-used eviction."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("pool capacity must be >= 1")
        self.capacity = capacity
        self._resident: OrderedDict[int, int] = OrderedDict()

    @property
    def resident_ids(self) -> tuple[int, ...]:
        return tuple(self._resident)

    def __contains__(self, adapter_id: int) -> bool:
        return adapter_id in self._resident

    def ensure(
        self, needed: Sequence[int], byte_size: dict[int, int]
    ) -> tuple[list[int], list[int], int]:
        """Make every id in `needed` resident; returns (paged, evicted, bytes).

        Ids are processed in the given order and all of them are protected
        from eviction for the duration of the call.
        """
        needed = list(dict.fromkeys(needed))
        if len(needed) > self.capacity:
            raise InfeasibleBatchError(
                f"step needs {len(needed)} adapters but the device holds {self.capacity}"
            )
        paged: list[int] = []
        evicted: list[int] = []
        moved_bytes = 0
        pinned = set(needed)
        for aid in needed:
            if aid in self._resident:
                self._resident.move_to_end(aid)
                continue
            while len(self._resident) >= self.capacity:
                victim = next(a for a in self._resident if a not in pinned)
                del self._resident[victim]
                evicted.append(victim)
            self._resident[aid] = byte_size[aid]
            moved_bytes += byte_size[aid]
            paged.append(aid)
        return paged, evicted, moved_bytes


class _Request:
    """Mutable per-request progress; timings are clock values in seconds."""

    def __init__(self, spec: RequestSpec):
        self.spec = spec
        self.prefill_pos = 0
        self.tokens_out = 0
        self.t_admit = -1.0
        self.t_prefill_done = -1.0
        self.t_first_token = -1.0
        self.t_finish = -1.0
        # functional-mode state
        self.prompt_ids: np.ndarray | None = None
        self.last_logits: np.ndarray | None = None
        self.generated: list[int] = []

    @property
    def in_decode(self) -> bool:
        return self.prefill_pos >= self.spec.prompt_len

    @property
    def done(self) -> bool:
        return self.in_decode and self.tokens_out >= self.spec.output_len


@dataclass(frozen=True)
class EngineResult:
    config: EngineConfig
    setup: AdapterSetup | None
    steps: tuple[StepRecord, ...]
    events: tuple[TraceEvent, ...]
    timings: tuple[RequestTiming, ...]
    report: MetricsReport
    wall_s: float
    adapter_versions: dict[int, int] = field(default_factory=dict)
    generated_tokens: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def trace_csv(self) -> str:
        lines = ["step,clock,kind,request_id,adapter_id,tokens"]
        for ev in self.events:
            rid = "" if ev.request_id is None else str(ev.request_id)
            aid = "" if ev.adapter_id is None else str(ev.adapter_id)
            lines.append(f"{ev.step},{ev.clock!r},{ev.kind},{rid},{aid},{ev.tokens}")
        return "\n".join(lines) + "\n"

    def write_trace(self, path: str | Path) -> None:
        Path(path).write_text(self.trace_csv())


class Engine:
    def __init__(self, config: EngineConfig):
        self.config = config

    # ------------------------------------------------------------- setup

    def _adapter_ids(self, workload: Sequence[RequestSpec]) -> list[int]:
        ids = sorted({s.adapter_id for s in workload if s.adapter_id is not None})
        host_cap = self.config.max_host_adapters
        if host_cap is not None and len(ids) > host_cap:
            raise ConfigError(
                f"workload uses {len(ids)} adapters but the host holds {host_cap}"
            )
        return ids

    def _adapter_sites(self, setup: AdapterSetup) -> int:
        layers = (
            self.config.model.n_layers
            if self.config.mode == EngineMode.FUNCTIONAL
            else self.config.shape.n_layers
        )
        if setup.kind is AdapterKind.LORA:
            return 7 * layers
        return layers

    def _validate_workload(self, workload: Sequence[RequestSpec]) -> None:
        if not workload:
            raise ConfigError("workload is empty")
        if self.config.mode == EngineMode.FUNCTIONAL:
            cap = self.config.model.max_seq
            for spec in workload:
                if spec.total_len > cap:
                    raise ConfigError(
                        f"request {spec.request_id} needs {spec.total_len} positions "
                        f"but the model caches {cap}"
                    )

    # --------------------------------------------------------------- run

    def run(
        self,
        workload: Sequence[RequestSpec],
        setup: AdapterSetup | None = None,
        weight_syncs: Sequence[WeightSync] = (),
    ) -> EngineResult:
        cfg = self.config
        self._validate_workload(workload)
        adapter_ids = self._adapter_ids(workload)
        if adapter_ids and setup is None:
            raise ConfigError("workload routes to adapters but no setup was given")

        functional = cfg.mode == EngineMode.FUNCTIONAL
        if functional and cfg.warmup:
            # untimed pass over the same workload, different seed, discarded
            cold = Engine(replace(cfg, warmup=False, seed=cfg.seed + 1))
            cold.run(workload, setup)

        weights: ModelWeights | None = None
        catalogue: dict[int, ModelAdapter] = {}
        cache: KvCache | None = None
        if functional:
            weights = build_model(cfg.model)
            cache = KvCache(cfg.model.n_layers)
            for aid in adapter_ids:
                adapter = build_adapter(
                    cfg.model, aid, setup.kind, setup.rank, setup.schedule,
                    seed=_adapter_seed(cfg.seed, aid), scaling=setup.scaling,
                )
                if setup.perturb_sigma > 0:
                    adapter = perturb_adapter(
                        adapter, _adapter_seed(cfg.seed, aid) ^ 1, setup.perturb_sigma
                    )
                catalogue[aid] = adapter

        byte_size: dict[int, int] = {}
        for aid in adapter_ids:
            if functional:
                sites = list(catalogue[aid].lora_sites.values()) or list(
                    catalogue[aid].reft_sites
                )
                byte_size[aid] = sum(t.nbytes for p in sites for t in p.tensors)
            else:
                byte_size[aid] = (
                    adapter_total_params(setup.kind, setup.rank, cfg.shape)
                    * cfg.hardware.bytes_per_param
                )

        versions = {aid: 0 for aid in adapter_ids}
        syncs_by_step: dict[int, list[WeightSync]] = {}
        for sync in weight_syncs:
            syncs_by_step.setdefault(sync.step, []).append(sync)

        pool = AdapterPool(cfg.max_gpu_adapters)
        queue: list[_Request] = [_Request(s) for s in workload]
        running: list[_Request] = []
        steps: list[StepRecord] = []
        events: list[TraceEvent] = []
        finished: list[_Request] = []
        clock = 0.0
        step_idx = 0

        while queue or running:
            t0 = clock
            while queue and len(running) < cfg.max_batch:
                req = queue.pop(0)
                req.t_admit = t0
                running.append(req)
                events.append(
                    TraceEvent("admit", step_idx, t0, req.spec.request_id,
                               req.spec.adapter_id, 0)
                )

            decode_sched, prefill_sched, workset = self._form_batch(running, setup)
            if not decode_sched and not prefill_sched:
                raise StateError("no request could be scheduled; engine is stuck")

            paged, evicted, moved = pool.ensure(workset, byte_size)
            paging_s = paging_time(moved, cfg.hardware)
            for aid in paged:
                events.append(TraceEvent("page_in", step_idx, t0, None, aid, 0))
            for aid in evicted:
                events.append(TraceEvent("evict", step_idx, t0, None, aid, 0))

            if functional:
                compute_s, kv_pairs, step_cost, ad_decode = self._step_functional(
                    weights, cache, catalogue, decode_sched, prefill_sched
                )
            else:
                compute_s, kv_pairs, step_cost, ad_decode = self._step_cost(
                    setup, decode_sched, prefill_sched
                )

            clock = t0 + compute_s + paging_s
            n_prefill = sum(q for _, q in prefill_sched)

            for req, chunk in prefill_sched:
                req.prefill_pos += chunk
                events.append(
                    TraceEvent("prefill", step_idx, clock, req.spec.request_id,
                               req.spec.adapter_id, chunk)
                )
                if req.in_decode:
                    req.t_prefill_done = clock
            for req in decode_sched:
                req.tokens_out += 1
                events.append(
                    TraceEvent("decode", step_idx, clock, req.spec.request_id,
                               req.spec.adapter_id, 1)
                )
                if req.tokens_out == 1:
                    req.t_first_token = clock
                if req.done:
                    req.t_finish = clock
                    events.append(
                        TraceEvent("finish", step_idx, clock, req.spec.request_id,
                                   req.spec.adapter_id, 0)
                    )
                    if functional:
                        cache.drop(req.spec.request_id)
                    finished.append(req)
            running = [r for r in running if not r.done]

            steps.append(
                StepRecord(
                    index=step_idx,
                    t_start=t0,
                    t_end=clock,
                    compute_s=compute_s,
                    paging_s=paging_s,
                    prefill_tokens=n_prefill,
                    decode_tokens=len(decode_sched),
                    kv_pairs=kv_pairs,
                    flops=step_cost[0],
                    hbm_bytes=step_cost[1],
                    adapter_decode_flops=ad_decode[0],
                    adapter_decode_bytes=ad_decode[1],
                    scheduled=tuple(
                        [r.spec.request_id for r in decode_sched]
                        + [r.spec.request_id for r, _ in prefill_sched]
                    ),
                    workset=tuple(workset),
                    resident=pool.resident_ids,
                    paged_in=tuple(paged),
                )
            )

            pending = syncs_by_step.pop(step_idx, None)
            if pending:
                self._apply_syncs(pending, catalogue, versions, functional)
                for sync in pending:
                    events.append(
                        TraceEvent("sync", step_idx, clock, None, sync.adapter_id, 0)
                    )
            step_idx += 1

        timings = tuple(
            RequestTiming(
                request_id=r.spec.request_id,
                prompt_len=r.spec.prompt_len,
                output_len=r.spec.output_len,
                t_arrival=0.0,
                t_admit=r.t_admit,
                t_first_token=r.t_first_token,
                t_finish=r.t_finish,
            )
            for r in sorted(finished, key=lambda r: r.spec.request_id)
        )
        report = aggregate(timings, clock)
        generated = {
            r.spec.request_id: tuple(r.generated) for r in finished if r.generated
        }
        return EngineResult(
            config=cfg,
            setup=setup,
            steps=tuple(steps),
            events=tuple(events),
            timings=timings,
            report=report,
            wall_s=clock,
            adapter_versions=versions,
            generated_tokens=generated,
        )

    # -------------------------------------------------------- scheduling

    def _executes(self, req: _Request, phase: Phase, setup: AdapterSetup | None) -> bool:
        if req.spec.adapter_id is None or setup is None:
            return False
        if phase is Phase.DECODE and setup.schedule is PositionSchedule.PREFILL_ONLY:
            return False
        return True

    def _form_batch(
        self, running: list[_Request], setup: AdapterSetup | None
    ) -> tuple[list[_Request], list[tuple[_Request, int]], list[int]]:
        cfg = self.config
        budget = cfg.step_token_budget
        workset: list[int] = []
        decode_sched: list[_Request] = []
        prefill_sched: list[tuple[_Request, int]] = []

        def fits(req: _Request, phase: Phase) -> bool:
            if not self._executes(req, phase, setup):
                return True
            aid = req.spec.adapter_id
            if aid in workset:
                return True
            if len(workset) < cfg.max_gpu_adapters:
                workset.append(aid)
                return True
            return False

        for req in running:
            if req.in_decode and not req.done:
                if budget < 1:
                    break
                if fits(req, Phase.DECODE):
                    decode_sched.append(req)
                    budget -= 1
        for req in running:
            if req.in_decode:
                continue
            if budget < 1:
                break
            chunk = req.spec.prompt_len - req.prefill_pos
            if cfg.chunk_size is not None:
                chunk = min(chunk, cfg.chunk_size)
            chunk = min(chunk, budget)
            if chunk < 1:
                continue
            if fits(req, Phase.PREFILL):
                prefill_sched.append((req, chunk))
                budget -= chunk
        return decode_sched, prefill_sched, workset

    # ------------------------------------------------------------- steps

    def _step_cost(self, setup, decode_sched, prefill_sched):
        cfg = self.config
        hw, shape = cfg.hardware, cfg.shape
        kv_pairs = 0
        for req in decode_sched:
            kv_pairs += req.spec.prompt_len + req.tokens_out + 1
        for req, chunk in prefill_sched:
            kv_pairs += chunk * req.prefill_pos + chunk * (chunk + 1) // 2
        tokens = len(decode_sched) + sum(q for _, q in prefill_sched)
        phase = Phase.DECODE if decode_sched else Phase.PREFILL
        cost = base_step_cost(shape, phase, tokens, kv_pairs, hw)

        ad_decode = (0.0, 0.0)
        if setup is not None:
            sites = self._adapter_sites(setup)
            dec_tokens: dict[int, int] = {}
            for req in decode_sched:
                if self._executes(req, Phase.DECODE, setup):
                    aid = req.spec.adapter_id
                    dec_tokens[aid] = dec_tokens.get(aid, 0) + 1
            pre_tokens: dict[int, int] = {}
            for req, chunk in prefill_sched:
                if self._executes(req, Phase.PREFILL, setup):
                    aid = req.spec.adapter_id
                    pre_tokens[aid] = pre_tokens.get(aid, 0) + chunk
            if dec_tokens:
                c = adapter_step_cost(
                    setup.kind, setup.rank, shape.d_model, setup.schedule,
                    Phase.DECODE, len(dec_tokens), list(dec_tokens.values()),
                    hw, sites=sites,
                )
                ad_decode = (c.flops, c.hbm_bytes)
                cost = combine_costs(cost, c)
            if pre_tokens:
                c = adapter_step_cost(
                    setup.kind, setup.rank, shape.d_model, setup.schedule,
                    Phase.PREFILL, len(pre_tokens), list(pre_tokens.values()),
                    hw, sites=sites,
                )
                cost = combine_costs(cost, c)
        return step_time(cost, hw), kv_pairs, (cost.flops, cost.hbm_bytes), ad_decode

    def _step_functional(self, weights, cache, catalogue, decode_sched, prefill_sched):
        cfg = self.config
        entries: list[SeqEntry] = []
        for req in decode_sched:
            if req.last_logits is None:
                raise StateError("decode scheduled before any logits exist")
            token = int(np.argmax(req.last_logits))
            req.generated.append(token)
            entries.append(
                SeqEntry(
                    seq_id=req.spec.request_id,
                    tokens=(token,),
                    prompt_len=req.spec.prompt_len,
                    phase=Phase.DECODE,
                    adapter_id=req.spec.adapter_id,
                    schedule=self._entry_schedule(req, catalogue),
                )
            )
        for req, chunk in prefill_sched:
            if req.prompt_ids is None:
                rng = rng_from_seed(cfg.seed, _PROMPT_STREAM_BASE + req.spec.request_id)
                req.prompt_ids = rng.integers(0, cfg.model.vocab, size=req.spec.prompt_len)
            lo = req.prefill_pos
            toks = tuple(int(t) for t in req.prompt_ids[lo : lo + chunk])
            entries.append(
                SeqEntry(
                    seq_id=req.spec.request_id,
                    tokens=toks,
                    prompt_len=req.spec.prompt_len,
                    phase=Phase.PREFILL,
                    adapter_id=req.spec.adapter_id,
                    schedule=self._entry_schedule(req, catalogue),
                )
            )
        batch = make_batch(entries)
        t_wall = time.perf_counter()
        logits, _ = forward_chunk(weights, batch, catalogue, cache)
        compute_s = time.perf_counter() - t_wall

        kv_pairs = 0
        for req in decode_sched:
            kv_pairs += req.spec.prompt_len + req.tokens_out + 1
        for req, chunk in prefill_sched:
            kv_pairs += chunk * req.prefill_pos + chunk * (chunk + 1) // 2

        for i, req in enumerate(decode_sched):
            req.last_logits = logits[i]
        off = len(decode_sched)
        for j, (req, chunk) in enumerate(prefill_sched):
            if req.prefill_pos + chunk >= req.spec.prompt_len:
                req.last_logits = logits[off + j]
        return compute_s, kv_pairs, (0.0, 0.0), (0.0, 0.0)

    def _entry_schedule(self, req: _Request, catalogue) -> PositionSchedule | None:
        aid = req.spec.adapter_id
        if aid is None:
            return None
        return catalogue[aid].schedule

    # -------------------------------------------------------------- sync

    def _apply_syncs(self, syncs, catalogue, versions, functional) -> None:
        for sync in syncs:
            if sync.adapter_id not in versions:
                raise SyncError(f"sync targets unknown adapter {sync.adapter_id}")
            if functional:
                if sync.payload is None:
                    raise SyncError("functional sync needs replacement weights")
                p = sync.payload
                current = catalogue[sync.adapter_id]
                if (
                    p.adapter_id != sync.adapter_id
                    or p.kind is not current.kind
                    or p.rank != current.rank
                    or p.schedule is not current.schedule
                ):
                    raise SyncError(
                        f"replacement for adapter {sync.adapter_id} does not match"
                    )
        for sync in syncs:
            if functional:
                catalogue[sync.adapter_id] = sync.payload
            versions[sync.adapter_id] += 1


def simulate(
    workload: Sequence[RequestSpec],
    config: EngineConfig | None = None,
    setup: AdapterSetup | None = None,
    weight_syncs: Sequence[WeightSync] = (),
) -> EngineResult:
    """Run one serving simulation and return its result."""
    return Engine(config or EngineConfig()).run(workload, setup, weight_syncs)
