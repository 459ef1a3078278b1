import numpy as np
import pytest

from prefillsim.adapters import AdapterKind, PositionSchedule
from prefillsim.errors import BatchError, ConfigError, StateError
from prefillsim.linalg import rng_from_seed
from prefillsim.model import (
    ForwardBatch,
    KvCache,
    ModelConfig,
    Phase,
    SeqEntry,
    build_adapter,
    build_model,
    compute_position_mask,
    decode_step,
    forward_chunk,
    generate,
    make_batch,
    perturb_adapter,
    prefill,
)

CFG = ModelConfig(d_model=16, n_layers=2, vocab=31, seed=5, max_seq=64)


def model():
    return build_model(CFG)


def prompt_ids(n, seed=0):
    return tuple(int(t) for t in rng_from_seed(seed).integers(0, CFG.vocab, size=n))


def full_prefill_batch(prompt, adapter=None):
    aid = adapter.adapter_id if adapter is not None else None
    sched = adapter.schedule if adapter is not None else None
    return make_batch([SeqEntry(0, prompt, len(prompt), Phase.PREFILL, aid, sched)])


# ---------------------------------------------------------------- weights


def test_build_model_is_deterministic():
    a, b = build_model(CFG), build_model(CFG)
    assert np.array_equal(a.embed, b.embed)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.Wdown, lb.Wdown)
    c = build_model(ModelConfig(16, 2, 31, seed=6, max_seq=64))
    assert not np.array_equal(a.embed, c.embed)


def test_build_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(0, 1, 10, seed=0)
    with pytest.raises(ConfigError):
        ModelConfig(8, 1, 10, seed=0, lora_targets=("Wx",))


# ---------------------------------------------------------------- cache


def test_cache_append_only_and_isolated():
    cache = KvCache(2)
    cache.append(0, 0, np.zeros((3, 4)), np.zeros((3, 4)))
    cache.append(0, 1, np.zeros((3, 4)), np.zeros((3, 4)))
    assert cache.length(0) == 3
    assert cache.length(1) == 0
    cache.append(1, 0, np.zeros((2, 4)), np.zeros((2, 4)))
    cache.append(1, 1, np.zeros((2, 4)), np.zeros((2, 4)))
    assert cache.length(0) == 3  # untouched by the other sequence
    cache.drop(0)
    assert cache.length(0) == 0
    assert cache.length(1) == 2


def test_cache_ragged_layers_detected():
    cache = KvCache(2)
    cache.append(0, 0, np.zeros((3, 4)), np.zeros((3, 4)))
    with pytest.raises(StateError):
        cache.length(0)


# ---------------------------------------------------------------- batches


def test_batch_offset_validation():
    e = SeqEntry(0, (1, 2, 3), 3, Phase.PREFILL)
    with pytest.raises(BatchError):
        ForwardBatch((e,), (0, 2))
    with pytest.raises(BatchError):
        ForwardBatch((e,), (1, 4))
    b = make_batch([e])
    assert b.query_start_loc == (0, 3)
    assert b.total_tokens == 3


def test_decode_entry_must_be_single_token():
    with pytest.raises(BatchError):
        SeqEntry(0, (1, 2), 4, Phase.DECODE)


def test_duplicate_sequence_rejected():
    e1 = SeqEntry(0, (1,), 1, Phase.PREFILL)
    e2 = SeqEntry(0, (2,), 1, Phase.PREFILL)
    with pytest.raises(BatchError):
        make_batch([e1, e2])


# ---------------------------------------------------------------- mask


def test_mask_all_decode_prefill_only_is_uniform_false():
    entries = [
        SeqEntry(i, (1,), 4, Phase.DECODE, adapter_id=i, schedule=PositionSchedule.PREFILL_ONLY)
        for i in range(3)
    ]
    mask = compute_position_mask(make_batch(entries))
    assert mask.uniform is False
    assert not mask.values.any()


def test_mask_mixed_prefill_and_all_positions_decode():
    entries = [
        SeqEntry(0, (5, 6), 2, Phase.PREFILL, adapter_id=1, schedule=PositionSchedule.PREFILL_ONLY),
        SeqEntry(1, (7,), 3, Phase.DECODE, adapter_id=2, schedule=PositionSchedule.ALL_POSITIONS),
    ]
    mask = compute_position_mask(make_batch(entries))
    assert mask.values.tolist() == [True, True, True]
    assert mask.uniform is True


def test_mask_sequences_without_adapters_are_unselected():
    entries = [
        SeqEntry(0, (5, 6), 4, Phase.PREFILL),
        SeqEntry(1, (7,), 2, Phase.DECODE, adapter_id=2, schedule=PositionSchedule.ALL_POSITIONS),
    ]
    mask = compute_position_mask(make_batch(entries))
    assert mask.values.tolist() == [False, False, True]
    assert mask.uniform is None


def enumerate_mask(batch, cache_lengths):
    # independent per-token reference: walk every entry and token, compute
    # its absolute position and test schedule membership directly
    out = []
    for entry in batch.entries:
        start = cache_lengths[entry.seq_id]
        for i in range(len(entry.tokens)):
            pos = start + i  # 0-based; prompt positions are pos < prompt_len
            if entry.adapter_id is None:
                out.append(False)
            elif entry.schedule is PositionSchedule.ALL_POSITIONS:
                out.append(True)
            else:
                out.append(pos < entry.prompt_len)
    return out


def test_mask_matches_per_token_enumeration_on_random_batches():
    rng = rng_from_seed(99)
    for _ in range(200):
        entries = []
        cache_lengths = {}
        n = int(rng.integers(1, 6))
        for seq in range(n):
            p = int(rng.integers(1, 9))
            phase = Phase.PREFILL if rng.random() < 0.5 else Phase.DECODE
            if phase is Phase.PREFILL:
                start = int(rng.integers(0, p))
                span = int(rng.integers(1, p - start + 1))
            else:
                extra = int(rng.integers(0, 4))
                start = p + extra
                span = 1
            has_adapter = rng.random() < 0.8
            sched = (
                PositionSchedule.ALL_POSITIONS if rng.random() < 0.5 else PositionSchedule.PREFILL_ONLY
            )
            entries.append(
                SeqEntry(
                    seq,
                    tuple(int(t) for t in rng.integers(0, 10, size=span)),
                    p,
                    phase,
                    adapter_id=seq if has_adapter else None,
                    schedule=sched if has_adapter else None,
                )
            )
            cache_lengths[seq] = start
        batch = make_batch(entries)
        mask = compute_position_mask(batch)
        assert mask.values.tolist() == enumerate_mask(batch, cache_lengths)


# ---------------------------------------------------------------- forward


def test_forward_is_bit_reproducible():
    w = model()
    prompt = prompt_ids(6)
    a = generate(w, prompt, 5)
    b = generate(w, prompt, 5)
    assert a == b


def test_chunked_prefill_matches_one_shot():
    w = model()
    prompt = prompt_ids(7, seed=3)
    adapters = {}
    full_cache = KvCache(CFG.n_layers)
    full_logits, _ = prefill(w, full_prefill_batch(prompt), adapters, full_cache)
    for chunk in (1, 2, len(prompt)):
        cache = KvCache(CFG.n_layers)
        logits = None
        for s in range(0, len(prompt), chunk):
            piece = prompt[s : s + chunk]
            batch = make_batch([SeqEntry(0, piece, len(prompt), Phase.PREFILL)])
            logits, _ = forward_chunk(w, batch, adapters, cache)
        assert np.max(np.abs(logits - full_logits)) <= 1e-9
        for (r1, d1), (r2, d2) in zip(cache.shapes(0), full_cache.shapes(0)):
            assert (r1, d1) == (r2, d2)
        ka, va = cache.view(0, CFG.n_layers - 1)
        kb, vb = full_cache.view(0, CFG.n_layers - 1)
        assert np.max(np.abs(ka - kb)) <= 1e-9
        assert np.max(np.abs(va - vb)) <= 1e-9


def test_decode_requires_completed_prefill():
    w = model()
    cache = KvCache(CFG.n_layers)
    batch = make_batch([SeqEntry(0, (1,), 4, Phase.DECODE)])
    with pytest.raises(BatchError):
        decode_step(w, batch, {}, cache)


def test_prefill_chunk_cannot_run_past_prompt():
    w = model()
    cache = KvCache(CFG.n_layers)
    batch = make_batch([SeqEntry(0, (1, 2, 3), 2, Phase.PREFILL)])
    with pytest.raises(BatchError):
        prefill(w, batch, {}, cache)


def test_unknown_adapter_rejected():
    w = model()
    cache = KvCache(CFG.n_layers)
    batch = make_batch(
        [SeqEntry(0, (1,), 1, Phase.PREFILL, adapter_id=7, schedule=PositionSchedule.ALL_POSITIONS)]
    )
    with pytest.raises(BatchError):
        prefill(w, batch, {}, cache)


# ------------------------------------------------- adapter interactions


@pytest.mark.parametrize("kind", [AdapterKind.LORA, AdapterKind.DIREFT, AdapterKind.LOREFT])
@pytest.mark.parametrize("rank", [1, 8])
def test_zero_delta_adapter_generation_matches_base(kind, rank):
    w = model()
    prompt = prompt_ids(5, seed=11)
    adapter = build_adapter(CFG, 1, kind, rank, PositionSchedule.ALL_POSITIONS, seed=200)
    base_tokens, base_hidden = generate(w, prompt, 6, collect_hidden=True)
    tokens, hidden = generate(w, prompt, 6, adapter=adapter, collect_hidden=True)
    assert tokens == base_tokens
    worst = max(np.max(np.abs(x - y)) for x, y in zip(hidden, base_hidden))
    assert worst <= 1e-12


def test_perturbed_all_positions_adapter_changes_decode():
    w = model()
    prompt = prompt_ids(5, seed=12)
    adapter = perturb_adapter(
        build_adapter(CFG, 1, AdapterKind.DIREFT, 4, PositionSchedule.ALL_POSITIONS, seed=300),
        seed=301,
        sigma=0.5,
    )
    _, base_hidden = generate(w, prompt, 4, collect_hidden=True)
    _, hidden = generate(w, prompt, 4, adapter=adapter, collect_hidden=True)
    assert max(np.max(np.abs(x - y)) for x, y in zip(hidden, base_hidden)) > 1e-6


def test_adapters_never_change_cache_shapes():
    w = model()
    prompt = prompt_ids(6, seed=13)
    adapter = perturb_adapter(
        build_adapter(CFG, 1, AdapterKind.LORA, 4, PositionSchedule.ALL_POSITIONS, seed=400),
        seed=401,
    )
    cache_a = KvCache(CFG.n_layers)
    cache_b = KvCache(CFG.n_layers)
    prefill(w, full_prefill_batch(prompt), {}, cache_a)
    prefill(w, full_prefill_batch(prompt, adapter), {1: adapter}, cache_b)
    assert cache_a.shapes(0) == cache_b.shapes(0)


def test_prefill_only_adapter_with_ablated_attention_leaves_decode_bitwise():
    # with attention off, the only cross-position path is the cache, which
    # decode never reads; prompt-side deltas must not reach decode logits
    cfg = ModelConfig(d_model=16, n_layers=2, vocab=31, seed=5, max_seq=64, ablate_attention=True)
    w = build_model(cfg)
    prompt = prompt_ids(5, seed=14)
    adapter = perturb_adapter(
        build_adapter(cfg, 1, AdapterKind.DIREFT, 4, PositionSchedule.PREFILL_ONLY, seed=500),
        seed=501,
        sigma=0.7,
    )
    adapters = {1: adapter}

    def run(with_adapter):
        aid = 1 if with_adapter else None
        sched = PositionSchedule.PREFILL_ONLY if with_adapter else None
        cache = KvCache(cfg.n_layers)
        batch = make_batch([SeqEntry(0, prompt, len(prompt), Phase.PREFILL, aid, sched)])
        logits, _ = prefill(w, batch, adapters, cache)
        outs = []
        tok = 3
        for _ in range(4):
            step = make_batch([SeqEntry(0, (tok,), len(prompt), Phase.DECODE, aid, sched)])
            logits, _ = decode_step(w, step, adapters, cache)
            outs.append(logits.copy())
            tok = int(np.argmax(logits[0]))
        return outs

    for mine, base in zip(run(True), run(False)):
        assert np.array_equal(mine.view(np.uint64), base.view(np.uint64))


def test_prefill_only_adapter_with_attention_still_couples_via_cache():
    w = model()
    prompt = prompt_ids(5, seed=15)
    adapter = perturb_adapter(
        build_adapter(CFG, 1, AdapterKind.LORA, 4, PositionSchedule.PREFILL_ONLY, seed=600),
        seed=601,
        sigma=0.5,
    )
    base = generate(w, prompt, 1)
    cache = KvCache(CFG.n_layers)
    batch = full_prefill_batch(prompt, adapter)
    logits, _ = prefill(w, batch, {1: adapter}, cache)
    cache_b = KvCache(CFG.n_layers)
    base_logits, _ = prefill(w, full_prefill_batch(prompt), {}, cache_b)
    assert not np.array_equal(logits, base_logits)
    assert base is not None  # base generation sanity


def test_generate_zero_tokens():
    w = model()
    assert generate(w, prompt_ids(3), 0) == []
    with pytest.raises(BatchError):
        generate(w, (), 3)


def test_mixed_batch_runs_prefill_and_decode_together():
    w = model()
    adapters = {
        1: build_adapter(CFG, 1, AdapterKind.DIREFT, 2, PositionSchedule.ALL_POSITIONS, seed=700)
    }
    cache = KvCache(CFG.n_layers)
    warm = make_batch([SeqEntry(7, (1, 2, 3), 3, Phase.PREFILL)])
    prefill(w, warm, adapters, cache)
    mixed = make_batch(
        [
            SeqEntry(0, (4, 5), 2, Phase.PREFILL, adapter_id=1, schedule=PositionSchedule.ALL_POSITIONS),
            SeqEntry(7, (6,), 3, Phase.DECODE),
        ]
    )
    logits, _ = forward_chunk(w, mixed, adapters, cache)
    assert logits.shape == (2, CFG.vocab)
    assert cache.length(0) == 2
    assert cache.length(7) == 4
