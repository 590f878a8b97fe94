import math

from hypothesis import given
from hypothesis import strategies as st

from dynapar.profilers import layer_flops, profile_dataset, profile_hardware, profile_model
from dynapar.specs import ClusterSpec, JobSpec, LayerSpec, LinkSpec, ModelSpec

import pytest

INTRA, INTER = LinkSpec(300e9, 1e-6), LinkSpec(25e9, 5e-6)


def cluster(nodes, per_node, peak=100e12, eff=0.5):
    return ClusterSpec(nodes, per_node, 40e9, peak, eff, INTRA, INTER)


def test_link_lookup_by_node():
    hw = profile_hardware(cluster(2, 8))
    assert hw.link(0, 7) == INTRA
    assert hw.link(0, 8) == INTER
    assert hw.total_gpus == 16


def test_single_gpu():
    assert profile_hardware(cluster(1, 1)).total_gpus == 1


def test_effective_flops():
    assert profile_hardware(cluster(1, 1, 100e12, 0.5)).effective_flops == 50e12


@given(st.integers(1, 8), st.integers(1, 8), st.data())
def test_link_symmetric(nodes, per_node, data):
    hw = profile_hardware(cluster(nodes, per_node))
    a = data.draw(st.integers(0, hw.total_gpus - 1))
    b = data.draw(st.integers(0, hw.total_gpus - 1))
    assert hw.link(a, b) == hw.link(b, a)


def test_explicit_flops_pass_through():
    assert layer_flops(LayerSpec("attention", 1, 3e9, hidden_size=1024, seq_len=512)) == 3e9


def test_attention_formula():
    assert layer_flops(LayerSpec("attention", 1, hidden_size=1024, seq_len=512)) == 5.36870912e9


def test_mlp_formula():
    assert layer_flops(LayerSpec("mlp", 1, hidden_size=1024, seq_len=512)) == 8.589934592e9


def test_missing_flops_source():
    with pytest.raises(ValueError):
        layer_flops(LayerSpec("other", 1))


def test_profile_model_aggregates():
    layers = tuple(LayerSpec("attention" if i % 2 == 0 else "mlp", 100 + i, hidden_size=64, seq_len=32)
                   for i in range(48))
    profile = profile_model(ModelSpec(layers))
    assert len(profile) == 48
    assert profile.total_params == sum(100 + i for i in range(48))
    assert profile.total_flops_fwd == sum(l.flops_fwd for l in profile.layers)
    assert all(l.flops_bwd == 2 * l.flops_fwd for l in profile.layers)
    # default activation is seq * hidden * precision
    assert profile.layers[0].activation_bytes == 32 * 64 * 2


def test_other_kind_not_shardable():
    profile = profile_model(ModelSpec((LayerSpec("other", 5, 1e9, 1_000_000),)))
    assert not profile.layers[0].tp_shardable
    assert profile.layers[0].activation_bytes == 1e6


def test_embedding_shardable():
    assert profile_model(ModelSpec((LayerSpec("embedding", 5, 1e9, 10),))).layers[0].tp_shardable


def test_params_over_pipeline_threshold():
    profile = profile_model(ModelSpec((LayerSpec("attention", 600_000_000, 1e9),
                                       LayerSpec("mlp", 600_000_000, 1e9))))
    assert profile.total_params == 1_200_000_000 > 1e9


@given(st.lists(st.floats(0, 1e12), min_size=1, max_size=10))
def test_flops_totals_are_sums(flops):
    profile = profile_model(ModelSpec(tuple(LayerSpec("other", 1, f) for f in flops)))
    assert profile.total_flops_fwd == sum(flops)
    assert all(l.flops_bwd / l.flops_fwd == 2 for l in profile.layers if l.flops_fwd)


def test_dataset_profile():
    assert profile_dataset(JobSpec(8, 1, loader_max_throughput=10000)).max_input_throughput == 10000
    default = profile_dataset(JobSpec(8, 1))
    assert default.max_input_throughput == 1e12 and default.global_batch_size == 8
    assert math.isfinite(default.max_input_throughput)
