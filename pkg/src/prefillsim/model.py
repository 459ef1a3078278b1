"""A tiny deterministic decoder for exercising adapters end to end.

The model is deliberately small and plain: token embedding plus learned
absolute position embedding, then per layer a single-head causal attention
block and a gated MLP on a residual stream. There is no normalisation and
no rotary embedding, so every code path is easy to reason about and the
whole forward stays bit-reproducible for a given seed and inputs.

Adapter hooks:

* low-rank adapters wrap any of the seven projections
  Wq, Wk, Wv, Wo, Wgate, Wup, Wdown;
* subspace adapters (direft / loreft) edit the residual stream once per
  layer, after the MLP residual add.

Deltas are only added at token positions selected by the batch's position
mask; rows outside the mask are left bit-identical. The KV cache is
append-only and its shape never depends on which adapters are attached.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .adapters import (
    AdapterKind,
    AdapterParams,
    PositionSchedule,
    ScalingRule,
    delta_for_rows,
    init_zero_delta,
)
from .errors import BatchError, ConfigError, ShapeError, StateError
from .linalg import rng_from_seed

__all__ = [
    "LORA_TARGETS",
    "Phase",
    "ModelConfig",
    "ModelWeights",
    "KvCache",
    "SeqEntry",
    "ForwardBatch",
    "PositionMask",
    "ModelAdapter",
    "build_model",
    "build_adapter",
    "perturb_adapter",
    "make_batch",
    "compute_position_mask",
    "forward_chunk",
    "prefill",
    "decode_step",
    "generate",
]

LORA_TARGETS = ("Wq", "Wk", "Wv", "Wo", "Wgate", "Wup", "Wdown")


class Phase(enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of a toy model. ffn width is fixed at 2 * d_model."""

    d_model: int
    n_layers: int
    vocab: int
    seed: int
    max_seq: int = 512
    ablate_attention: bool = False
    lora_targets: tuple[str, ...] = LORA_TARGETS

    def __post_init__(self) -> None:
        if self.d_model < 1 or self.n_layers < 1 or self.vocab < 2:
            raise ConfigError("d_model, n_layers >= 1 and vocab >= 2 required")
        if self.max_seq < 2:
            raise ConfigError("max_seq must be at least 2")
        bad = set(self.lora_targets) - set(LORA_TARGETS)
        if bad:
            raise ConfigError(f"unknown lora targets: {sorted(bad)}")

    @property
    def ffn_dim(self) -> int:
        return 2 * self.d_model


@dataclass(frozen=True)
class LayerWeights:
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    Wgate: np.ndarray
    Wup: np.ndarray
    Wdown: np.ndarray


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    embed: np.ndarray
    pos: np.ndarray
    layers: tuple[LayerWeights, ...]
    unembed: np.ndarray


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def build_model(config: ModelConfig) -> ModelWeights:
    """Deterministically initialise weights from config.seed.

    Projections are scaled by 0.5 / sqrt(fan_in) to keep residual growth
    mild over a handful of layers; embeddings use sigma = 0.3.
    """
    d, f = config.d_model, config.ffn_dim
    stream = iter(range(1, 10_000))

    def normal(rows: int, cols: int, sigma: float) -> np.ndarray:
        g = rng_from_seed(config.seed, next(stream))
        return _freeze(g.normal(0.0, sigma, size=(rows, cols)))

    embed = normal(config.vocab, d, 0.3)
    pos = normal(config.max_seq, d, 0.3)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                Wq=normal(d, d, 0.5 / np.sqrt(d)),
                Wk=normal(d, d, 0.5 / np.sqrt(d)),
                Wv=normal(d, d, 0.5 / np.sqrt(d)),
                Wo=normal(d, d, 0.5 / np.sqrt(d)),
                Wgate=normal(f, d, 0.5 / np.sqrt(d)),
                Wup=normal(f, d, 0.5 / np.sqrt(d)),
                Wdown=normal(d, f, 0.5 / np.sqrt(f)),
            )
        )
    unembed = normal(config.vocab, d, 1.0 / np.sqrt(d))
    return ModelWeights(config, embed, pos, tuple(layers), unembed)


# --------------------------------------------------------------- KV cache


class KvCache:
    """Append-only per-sequence key/value store, one slot per layer.

    Entries are appended as row blocks during prefill chunks and one row at
    a time during decode. Nothing ever rewrites an existing row; finished
    sequences are removed wholesale with drop().
    """

    def __init__(self, n_layers: int):
        if n_layers < 1:
            raise ConfigError("cache needs at least one layer")
        self.n_layers = n_layers
        self._store: dict[int, list[tuple[list[np.ndarray], list[np.ndarray]]]] = {}

    def seq_ids(self) -> list[int]:
        return sorted(self._store)

    def length(self, seq_id: int) -> int:
        slot = self._store.get(seq_id)
        if slot is None:
            return 0
        lengths = {sum(b.shape[0] for b in ks) for ks, _ in slot}
        if len(lengths) != 1:
            raise StateError(f"cache for sequence {seq_id} is ragged across layers")
        return lengths.pop()

    def append(self, seq_id: int, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        if not 0 <= layer < self.n_layers:
            raise ShapeError(f"layer {layer} out of range")
        if k.shape != v.shape or k.ndim != 2:
            raise ShapeError("k and v must be matching (rows, d) blocks")
        slot = self._store.setdefault(
            seq_id, [([], []) for _ in range(self.n_layers)]
        )
        ks, vs = slot[layer]
        ks.append(np.asarray(k, dtype=np.float64))
        vs.append(np.asarray(v, dtype=np.float64))

    def view(self, seq_id: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
        slot = self._store.get(seq_id)
        if slot is None:
            raise StateError(f"sequence {seq_id} has no cache entries")
        ks, vs = slot[layer]
        if not ks:
            d = 0
            return np.zeros((0, d)), np.zeros((0, d))
        return np.concatenate(ks, axis=0), np.concatenate(vs, axis=0)

    def shapes(self, seq_id: int) -> list[tuple[int, int]]:
        """Per-layer (rows, d) of the stored keys; used by invariance tests."""
        slot = self._store.get(seq_id)
        if slot is None:
            return []
        out = []
        for ks, _ in slot:
            rows = sum(b.shape[0] for b in ks)
            d = ks[0].shape[1] if ks else 0
            out.append((rows, d))
        return out

    def drop(self, seq_id: int) -> None:
        self._store.pop(seq_id, None)


# --------------------------------------------------------------- batches


@dataclass(frozen=True)
class SeqEntry:
    """One sequence's contribution to a step: a prefill chunk or one decode token."""

    seq_id: int
    tokens: tuple[int, ...]
    prompt_len: int
    phase: Phase
    adapter_id: int | None = None
    schedule: PositionSchedule | None = None

    def __post_init__(self) -> None:
        if self.prompt_len < 1:
            raise BatchError(f"prompt_len must be >= 1, got {self.prompt_len}")
        if not self.tokens:
            raise BatchError("entry carries no tokens")
        if self.phase is Phase.DECODE and len(self.tokens) != 1:
            raise BatchError("decode entries carry exactly one token")
        if self.adapter_id is not None and self.schedule is None:
            raise BatchError("adapter without a position schedule")


@dataclass(frozen=True)
class ForwardBatch:
    entries: tuple[SeqEntry, ...]
    query_start_loc: tuple[int, ...]

    def __post_init__(self) -> None:
        offs = self.query_start_loc
        if len(offs) != len(self.entries) + 1 or offs[0] != 0:
            raise BatchError("query_start_loc must be a prefix-sum starting at 0")
        for i, entry in enumerate(self.entries):
            if offs[i + 1] - offs[i] != len(entry.tokens):
                raise BatchError(f"offsets disagree with token span of entry {i}")
        if any(b <= a for a, b in zip(offs, offs[1:])):
            raise BatchError("query_start_loc must be strictly increasing")
        seqs = [e.seq_id for e in self.entries]
        if len(set(seqs)) != len(seqs):
            raise BatchError("a sequence may appear at most once per batch")

    @property
    def total_tokens(self) -> int:
        return self.query_start_loc[-1]

    def span(self, i: int) -> slice:
        return slice(self.query_start_loc[i], self.query_start_loc[i + 1])


def make_batch(entries: Sequence[SeqEntry]) -> ForwardBatch:
    if not entries:
        raise BatchError("batch must contain at least one entry")
    offs = [0]
    for e in entries:
        offs.append(offs[-1] + len(e.tokens))
    return ForwardBatch(tuple(entries), tuple(offs))


@dataclass(frozen=True)
class PositionMask:
    """Boolean mask over a batch's flattened query tokens.

    uniform is True when every token is selected, False when none is, and
    None for mixed batches; the uniform cases let callers skip per-row
    bookkeeping entirely.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=bool)
        object.__setattr__(self, "values", vals)
        vals.flags.writeable = False

    @property
    def uniform(self) -> bool | None:
        if bool(self.values.all()):
            return True
        if not bool(self.values.any()):
            return False
        return None


def compute_position_mask(batch: ForwardBatch) -> PositionMask:
    """Mark the query tokens whose sequence schedule covers them.

    Prefill-chunk tokens are prompt positions, which both schedules cover;
    decode tokens are generated positions, covered only by ALL_POSITIONS.
    Sequences without an adapter contribute unselected tokens.
    """
    values = np.zeros(batch.total_tokens, dtype=bool)
    for i, entry in enumerate(batch.entries):
        if entry.adapter_id is None:
            continue
        covered = entry.phase is Phase.PREFILL or entry.schedule is PositionSchedule.ALL_POSITIONS
        if covered:
            values[batch.span(i)] = True
    return PositionMask(values)


# --------------------------------------------------------------- adapters


@dataclass(frozen=True)
class ModelAdapter:
    """Catalogue entry: one logical adapter with per-site parameter bundles.

    Low-rank adapters hold one bundle per (layer, target projection);
    subspace adapters hold one bundle per layer for the residual-stream
    hook. All bundles share kind, rank and schedule.
    """

    adapter_id: int
    kind: AdapterKind
    rank: int
    schedule: PositionSchedule
    lora_sites: Mapping[tuple[int, str], AdapterParams] = field(default_factory=dict)
    reft_sites: tuple[AdapterParams, ...] = ()


def _site_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, index)).generate_state(1)[0])


def build_adapter(
    config: ModelConfig,
    adapter_id: int,
    kind: AdapterKind,
    rank: int,
    schedule: PositionSchedule,
    seed: int,
    scaling: ScalingRule | None = None,
) -> ModelAdapter:
    """Create an untrained (zero-delta) adapter for every hook site of the model."""
    d, f = config.d_model, config.ffn_dim
    if kind is AdapterKind.LORA:
        shapes = {
            "Wq": (d, d),
            "Wk": (d, d),
            "Wv": (d, d),
            "Wo": (d, d),
            "Wgate": (f, d),
            "Wup": (f, d),
            "Wdown": (d, f),
        }
        sites = {}
        idx = 0
        for layer in range(config.n_layers):
            for name in config.lora_targets:
                sites[(layer, name)] = init_zero_delta(
                    kind, rank, shapes[name], _site_seed(seed, idx), scaling
                )
                idx += 1
        return ModelAdapter(adapter_id, kind, rank, schedule, lora_sites=sites)
    reft = tuple(
        init_zero_delta(kind, rank, (d,), _site_seed(seed, layer), scaling)
        for layer in range(config.n_layers)
    )
    return ModelAdapter(adapter_id, kind, rank, schedule, reft_sites=reft)


def _perturbed_params(params: AdapterParams, seed: int, sigma: float) -> AdapterParams:
    """Noise the trainable tensors so the delta stops being zero."""
    g = rng_from_seed(seed)
    kw: dict[str, np.ndarray] = {}
    if params.kind is AdapterKind.LORA:
        kw["A"] = params.A
        kw["B"] = params.B + g.normal(0.0, sigma, size=params.B.shape)
    elif params.kind is AdapterKind.DIREFT:
        kw["A"] = params.A + g.normal(0.0, sigma, size=params.A.shape)
        kw["B"] = params.B
        kw["b"] = params.b + g.normal(0.0, sigma, size=params.b.shape)
    else:
        kw["R"] = params.R
        kw["W"] = params.W + g.normal(0.0, sigma, size=params.W.shape)
        kw["b"] = params.b + g.normal(0.0, sigma, size=params.b.shape)
    return AdapterParams(params.kind, params.rank, params.dims, params.scaling, **kw)


def perturb_adapter(adapter: ModelAdapter, seed: int, sigma: float = 0.1) -> ModelAdapter:
    """Return a trained-looking copy of an adapter (same sites, noised tensors)."""
    if adapter.kind is AdapterKind.LORA:
        sites = {
            key: _perturbed_params(p, _site_seed(seed, i), sigma)
            for i, (key, p) in enumerate(sorted(adapter.lora_sites.items()))
        }
        return ModelAdapter(adapter.adapter_id, adapter.kind, adapter.rank, adapter.schedule, lora_sites=sites)
    reft = tuple(
        _perturbed_params(p, _site_seed(seed, i), sigma)
        for i, p in enumerate(adapter.reft_sites)
    )
    return ModelAdapter(adapter.adapter_id, adapter.kind, adapter.rank, adapter.schedule, reft_sites=reft)


# --------------------------------------------------------------- forward


def _validate_against_cache(batch: ForwardBatch, cache: KvCache, config: ModelConfig) -> dict[int, int]:
    starts = {}
    for entry in batch.entries:
        start = cache.length(entry.seq_id)
        if entry.phase is Phase.PREFILL:
            if start + len(entry.tokens) > entry.prompt_len:
                raise BatchError(
                    f"prefill chunk of sequence {entry.seq_id} runs past its prompt"
                )
        else:
            if start < entry.prompt_len:
                raise BatchError(
                    f"decode for sequence {entry.seq_id} before its prefill finished"
                )
        if start + len(entry.tokens) > config.max_seq:
            raise BatchError(f"sequence {entry.seq_id} exceeds max_seq={config.max_seq}")
        for t in entry.tokens:
            if not 0 <= t < config.vocab:
                raise BatchError(f"token id {t} outside vocab of {config.vocab}")
        starts[entry.seq_id] = start
    return starts


def _project(
    x: np.ndarray,
    W: np.ndarray,
    site: AdapterParams | None,
    rows: np.ndarray | None,
) -> np.ndarray:
    """x @ W.T with an optional low-rank delta on the selected rows."""
    out = x @ W.T
    if site is not None and rows is not None and rows.any():
        out[rows] += delta_for_rows(site, x[rows])
    return out


def forward_chunk(
    weights: ModelWeights,
    batch: ForwardBatch,
    adapters: Mapping[int, ModelAdapter],
    cache: KvCache,
    collect_hidden: bool = False,
):
    """Run one engine step's worth of tokens through the model.

    Returns (logits, hidden) where logits has one row per batch entry (the
    last query position of its span) and hidden is a list with the residual
    stream after every layer, or None unless collect_hidden is set.
    """
    config = weights.config
    starts = _validate_against_cache(batch, cache, config)
    for entry in batch.entries:
        if entry.adapter_id is not None and entry.adapter_id not in adapters:
            raise BatchError(f"adapter {entry.adapter_id} not in catalogue")

    mask = compute_position_mask(batch)
    skip_adapters = mask.uniform is False

    tokens = np.concatenate([np.asarray(e.tokens, dtype=np.intp) for e in batch.entries])
    positions = np.concatenate(
        [
            np.arange(starts[e.seq_id], starts[e.seq_id] + len(e.tokens), dtype=np.intp)
            for e in batch.entries
        ]
    )
    h = weights.embed[tokens] + weights.pos[positions]
    hidden: list[np.ndarray] | None = [] if collect_hidden else None

    def entry_sites(entry: SeqEntry, layer: int, name: str) -> AdapterParams | None:
        if skip_adapters or entry.adapter_id is None:
            return None
        adapter = adapters[entry.adapter_id]
        if adapter.kind is AdapterKind.LORA:
            return adapter.lora_sites.get((layer, name))
        return None

    def entry_reft(entry: SeqEntry, layer: int) -> AdapterParams | None:
        if skip_adapters or entry.adapter_id is None:
            return None
        adapter = adapters[entry.adapter_id]
        if adapter.kind is AdapterKind.LORA:
            return None
        return adapter.reft_sites[layer]

    d = config.d_model
    for layer_idx, lw in enumerate(weights.layers):
        # attention (single head, causal over cache + this chunk)
        for i, entry in enumerate(batch.entries):
            span = batch.span(i)
            x = h[span]
            rows = mask.values[span] if mask.uniform is None else (None if skip_adapters else np.ones(len(entry.tokens), bool))
            k_prev, v_prev = (
                cache.view(entry.seq_id, layer_idx)
                if starts[entry.seq_id] > 0
                else (np.zeros((0, d)), np.zeros((0, d)))
            )
            k_new = _project(x, lw.Wk, entry_sites(entry, layer_idx, "Wk"), rows)
            v_new = _project(x, lw.Wv, entry_sites(entry, layer_idx, "Wv"), rows)
            cache.append(entry.seq_id, layer_idx, k_new, v_new)
            if config.ablate_attention:
                continue
            q = _project(x, lw.Wq, entry_sites(entry, layer_idx, "Wq"), rows)
            K = np.concatenate([k_prev, k_new], axis=0)
            V = np.concatenate([v_prev, v_new], axis=0)
            scores = (q @ K.T) / np.sqrt(d)
            n_prev = k_prev.shape[0]
            q_pos = np.arange(len(entry.tokens))[:, None] + n_prev
            k_pos = np.arange(K.shape[0])[None, :]
            scores = np.where(k_pos <= q_pos, scores, -np.inf)
            scores -= scores.max(axis=1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=1, keepdims=True)
            ctx = probs @ V
            h[span] += _project(ctx, lw.Wo, entry_sites(entry, layer_idx, "Wo"), rows)

        # gated MLP and the residual-stream adapter hook
        for i, entry in enumerate(batch.entries):
            span = batch.span(i)
            x = h[span]
            rows = mask.values[span] if mask.uniform is None else (None if skip_adapters else np.ones(len(entry.tokens), bool))
            gate = _project(x, lw.Wgate, entry_sites(entry, layer_idx, "Wgate"), rows)
            up = _project(x, lw.Wup, entry_sites(entry, layer_idx, "Wup"), rows)
            act = gate * expit(gate) * up
            h[span] = x + _project(act, lw.Wdown, entry_sites(entry, layer_idx, "Wdown"), rows)
            site = entry_reft(entry, layer_idx)
            if site is not None and rows is not None and rows.any():
                block = h[span]
                block[rows] += delta_for_rows(site, block[rows])
        if collect_hidden:
            hidden.append(h.copy())

    last_rows = np.asarray([batch.query_start_loc[i + 1] - 1 for i in range(len(batch.entries))])
    logits = h[last_rows] @ weights.unembed.T
    return (logits, hidden) if collect_hidden else (logits, None)


def prefill(
    weights: ModelWeights,
    batch: ForwardBatch,
    adapters: Mapping[int, ModelAdapter],
    cache: KvCache,
    collect_hidden: bool = False,
):
    """Process prompt tokens. Entries must all be prefill chunks."""
    if any(e.phase is not Phase.PREFILL for e in batch.entries):
        raise BatchError("prefill() accepts only prefill entries")
    return forward_chunk(weights, batch, adapters, cache, collect_hidden)


def decode_step(
    weights: ModelWeights,
    batch: ForwardBatch,
    adapters: Mapping[int, ModelAdapter],
    cache: KvCache,
    collect_hidden: bool = False,
):
    """Advance every sequence by one token. Entries must all be decode tokens."""
    if any(e.phase is not Phase.DECODE for e in batch.entries):
        raise BatchError("decode_step() accepts only decode entries")
    return forward_chunk(weights, batch, adapters, cache, collect_hidden)


def generate(
    weights: ModelWeights,
    prompt: Sequence[int],
    max_new_tokens: int,
    adapter: ModelAdapter | None = None,
    collect_hidden: bool = False,
):
    """Greedy generation with a fresh cache.

    Returns the generated token ids, or (ids, hidden_blocks) when
    collect_hidden is set, where hidden_blocks is the concatenation of the
    per-layer residual snapshots of every forward pass in order.
    """
    if max_new_tokens < 0:
        raise BatchError("max_new_tokens must be >= 0")
    if not prompt:
        raise BatchError("prompt must be non-empty")
    config = weights.config
    adapters: dict[int, ModelAdapter] = {}
    adapter_id = None
    schedule = None
    if adapter is not None:
        adapters[adapter.adapter_id] = adapter
        adapter_id = adapter.adapter_id
        schedule = adapter.schedule
    cache = KvCache(config.n_layers)
    p = len(prompt)
    traces: list[np.ndarray] = []

    entry = SeqEntry(0, tuple(prompt), p, Phase.PREFILL, adapter_id, schedule)
    logits, hidden = prefill(weights, make_batch([entry]), adapters, cache, collect_hidden)
    if collect_hidden:
        traces.extend(hidden)
    out: list[int] = []
    for _ in range(max_new_tokens):
        next_token = int(np.argmax(logits[0]))
        out.append(next_token)
        step = SeqEntry(0, (next_token,), p, Phase.DECODE, adapter_id, schedule)
        logits, hidden = decode_step(weights, make_batch([step]), adapters, cache, collect_hidden)
        if collect_hidden:
            traces.extend(hidden)
    return (out, traces) if collect_hidden else out
