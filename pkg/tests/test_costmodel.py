"""Roofline cost model: intensities, step costs, timing, config io."""

import math

import pytest
from hypothesis import given, strategies as st

from prefillsim.adapters import AdapterKind, PositionSchedule
from prefillsim.costmodel import (
    H100_PROFILE,
    SHAPE_8B,
    SHAPE_70B,
    HardwareProfile,
    ModelShape,
    StepCost,
    adapter_step_cost,
    adapter_total_params,
    base_step_cost,
    combine_costs,
    is_compute_bound,
    load_hardware_profile,
    load_model_shape,
    lora_down_intensity,
    paging_time,
    site_params,
    step_time,
)
from prefillsim.errors import ConfigError, DomainError
from prefillsim.model import Phase


def intensity_from_counts(b, d, r):
    # independent route: count flops and half-precision bytes directly
    flops = 2.0 * b * d * r
    bytes_ = 2.0 * (b * d + d * r + b * r)
    return flops / bytes_


def test_intensity_matches_flop_byte_quotient():
    for b, d, r in [(1, 64, 1), (32, 4096, 16), (256, 8192, 64), (7, 333, 5)]:
        assert lora_down_intensity(b, d, r) == pytest.approx(
            intensity_from_counts(b, d, r), rel=1e-12
        )


def test_intensity_spot_value():
    # 1 / (1/16 + 1/32 + 1/4096), frozen from the direct count
    assert lora_down_intensity(32, 4096, 16) == pytest.approx(10.638961, abs=1e-6)


def test_intensity_stays_memory_bound_on_h100():
    worst = lora_down_intensity(256, 8192, 64)
    assert worst < H100_PROFILE.ridge
    assert worst == pytest.approx(50.88199, abs=1e-3)
    assert not is_compute_bound(worst, H100_PROFILE)


@given(
    st.integers(min_value=1, max_value=4096),
    st.integers(min_value=1, max_value=16384),
    st.integers(min_value=1, max_value=512),
)
def test_intensity_below_harmonic_bound(b, d, r):
    val = lora_down_intensity(b, d, r)
    assert val < min(b, d, r) + 1e-9
    assert val > 0


def test_intensity_rejects_bad_dims():
    with pytest.raises(DomainError):
        lora_down_intensity(0, 64, 4)
    with pytest.raises(DomainError):
        lora_down_intensity(8, 64, 0)


def test_ridge_consistency_enforced():
    with pytest.raises(ConfigError):
        HardwareProfile(
            peak_flops=989e12,
            hbm_bandwidth=3.35e12,
            link_bandwidth=32e9,
            bytes_per_param=2,
            ridge=100.0,
        )
    # the stock profile itself must satisfy its own check
    assert H100_PROFILE.ridge == pytest.approx(
        H100_PROFILE.peak_flops / H100_PROFILE.hbm_bandwidth, rel=0.05
    )


def test_profile_rejects_nonsense():
    with pytest.raises(ConfigError):
        HardwareProfile(989e12, -1.0, 32e9, 2, 295.0)
    with pytest.raises(ConfigError):
        HardwareProfile(989e12, 3.35e12, 32e9, 0, 295.0)
    with pytest.raises(ConfigError):
        HardwareProfile(989e12, 3.35e12, 32e9, 2, 295.0, adapter_op_overhead_s=-1e-6)


def test_params_total_closed_form():
    assert SHAPE_8B.params_total == 32 * (4 * 4096**2 + 3 * 4096 * 14336)
    assert SHAPE_8B.params_total == 7_784_628_224
    assert SHAPE_70B.params_total == 80 * (4 * 8192**2 + 3 * 8192 * 28672)


def test_base_step_cost_counts():
    hw = H100_PROFILE
    cost = base_step_cost(SHAPE_8B, Phase.DECODE, tokens_in_step=8, kv_pairs=1000, hw=hw)
    p = SHAPE_8B.params_total
    assert cost.flops == pytest.approx(2.0 * p * 8 + 2.0 * 1000 * 4096 * 32)
    assert cost.hbm_bytes == pytest.approx(p * 2 + 2.0 * 1000 * 4096 * 2 * 32)
    assert cost.phase is Phase.DECODE


def test_base_step_cost_validation():
    with pytest.raises(DomainError):
        base_step_cost(SHAPE_8B, Phase.PREFILL, 0, 0, H100_PROFILE)
    with pytest.raises(DomainError):
        base_step_cost(SHAPE_8B, Phase.PREFILL, 4, -1, H100_PROFILE)


def test_decode_step_is_memory_bound_at_small_batch():
    # single-token decode of the dense model: intensity ~1, far below ridge
    cost = base_step_cost(SHAPE_8B, Phase.DECODE, 1, 0, H100_PROFILE)
    assert not is_compute_bound(cost, H100_PROFILE)
    assert step_time(cost, H100_PROFILE) == pytest.approx(
        cost.hbm_bytes / H100_PROFILE.hbm_bandwidth
    )


def test_site_params():
    assert site_params(AdapterKind.LORA, 8, 4096) == 2 * 8 * 4096
    assert site_params(AdapterKind.DIREFT, 8, 4096) == 2 * 8 * 4096 + 8
    assert site_params(AdapterKind.LOREFT, 3, 10) == 63
    with pytest.raises(DomainError):
        site_params(AdapterKind.LORA, 0, 64)


def test_adapter_total_params():
    # residual-stream adapters hook once per layer
    want = 32 * (2 * 8 * 4096 + 8)
    assert adapter_total_params(AdapterKind.DIREFT, 8, SHAPE_8B) == want
    # projection adapters pay rank * (n + m) per rectangular site
    d, f = 4096, 14336
    per_layer = 4 * 8 * 2 * d + 3 * 8 * (d + f)
    assert adapter_total_params(AdapterKind.LORA, 8, SHAPE_8B) == 32 * per_layer


def test_prompt_only_adapter_costs_nothing_at_decode():
    cost = adapter_step_cost(
        AdapterKind.DIREFT,
        8,
        4096,
        PositionSchedule.PREFILL_ONLY,
        Phase.DECODE,
        distinct_adapters_in_batch=16,
        tokens_per_adapter=2,
        hw=H100_PROFILE,
        sites=32,
    )
    assert cost.flops == 0.0
    assert cost.hbm_bytes == 0.0


def test_adapter_bytes_double_with_two_distinct():
    kw = dict(
        kind=AdapterKind.DIREFT,
        rank=8,
        d=4096,
        schedule=PositionSchedule.ALL_POSITIONS,
        phase=Phase.DECODE,
        hw=H100_PROFILE,
        sites=32,
    )
    one = adapter_step_cost(
        distinct_adapters_in_batch=1, tokens_per_adapter=[32], **kw
    )
    two = adapter_step_cost(
        distinct_adapters_in_batch=2, tokens_per_adapter=[16, 16], **kw
    )
    # same token total, same flops; byte traffic is charged per adapter
    assert two.flops == pytest.approx(one.flops)
    assert two.hbm_bytes == pytest.approx(2.0 * one.hbm_bytes)


def test_adapter_cost_components():
    hw = H100_PROFILE
    cost = adapter_step_cost(
        AdapterKind.DIREFT,
        8,
        4096,
        PositionSchedule.ALL_POSITIONS,
        Phase.DECODE,
        distinct_adapters_in_batch=3,
        tokens_per_adapter=[4, 5, 6],
        hw=hw,
        sites=2,
    )
    params = 2 * 8 * 4096 + 8
    toks = 15
    assert cost.flops == pytest.approx(2.0 * params * toks * 2)
    per = params * 2 + 2.0 * toks * 4096 * 2 + hw.adapter_op_overhead_s * hw.hbm_bandwidth
    assert cost.hbm_bytes == pytest.approx(3 * per * 2)


def test_adapter_cost_validation():
    kw = dict(
        kind=AdapterKind.LORA,
        rank=4,
        d=64,
        schedule=PositionSchedule.ALL_POSITIONS,
        phase=Phase.PREFILL,
        hw=H100_PROFILE,
    )
    with pytest.raises(DomainError):
        adapter_step_cost(distinct_adapters_in_batch=2, tokens_per_adapter=[3], **kw)
    with pytest.raises(DomainError):
        adapter_step_cost(distinct_adapters_in_batch=1, tokens_per_adapter=[0], **kw)
    with pytest.raises(DomainError):
        adapter_step_cost(
            distinct_adapters_in_batch=-1, tokens_per_adapter=[], **kw
        )
    zero = adapter_step_cost(distinct_adapters_in_batch=0, tokens_per_adapter=[], **kw)
    assert zero.hbm_bytes == 0.0


def test_combine_and_step_time():
    a = StepCost(1e12, 1e9, Phase.DECODE)
    b = StepCost(2e12, 3e9, Phase.DECODE)
    both = combine_costs(a, b)
    assert both.flops == 3e12
    assert both.hbm_bytes == 4e9
    hw = H100_PROFILE
    assert step_time(both, hw) == max(3e12 / hw.peak_flops, 4e9 / hw.hbm_bandwidth)
    with pytest.raises(DomainError):
        combine_costs()


def test_paging_time_example():
    # 2 MB over a 32 GB/s link
    assert paging_time(2e6, H100_PROFILE) == pytest.approx(62.5e-6)
    with pytest.raises(DomainError):
        paging_time(-1.0, H100_PROFILE)


def test_step_cost_rejects_negative():
    with pytest.raises(DomainError):
        StepCost(-1.0, 0.0, Phase.PREFILL)


def test_config_round_trip(tmp_path):
    cfg = tmp_path / "hw.cfg"
    cfg.write_text(
        "[hardware]\n"
        "peak_flops = 989e12\n"
        "hbm_bandwidth = 3.35e12\n"
        "link_bandwidth = 32e9\n"
        "bytes_per_param = 2\n"
        "ridge = 295\n"
        "adapter_op_overhead_s = 5e-6\n"
        "\n"
        "[model]\n"
        "d_model = 4096\n"
        "n_layers = 32\n"
        "ffn_dim = 14336\n"
    )
    hw = load_hardware_profile(cfg)
    assert hw.peak_flops == 989e12
    assert hw.adapter_op_overhead_s == 5e-6
    shape = load_model_shape(cfg)
    assert shape == SHAPE_8B


def test_config_errors(tmp_path):
    missing = tmp_path / "nope.cfg"
    with pytest.raises(ConfigError):
        load_hardware_profile(missing)
    bad = tmp_path / "bad.cfg"
    bad.write_text("[hardware]\npeak_flops = fast\n")
    with pytest.raises(ConfigError):
        load_hardware_profile(bad)
    nosec = tmp_path / "nosec.cfg"
    nosec.write_text("[elsewhere]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_model_shape(nosec)


def test_weight_stream_size_8b():
    # half-precision dense weights: ~15.6 GB read every step
    gb = SHAPE_8B.params_total * 2 / 1e9
    assert math.isclose(gb, 15.569, rel_tol=1e-3)
