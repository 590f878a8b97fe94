import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynapar.specs import (
    ClusterSpec,
    JobSpec,
    LayerSpec,
    LinkSpec,
    ModelSpec,
    ParseError,
    ScenarioEvent,
    ValidationError,
    cluster_from_dict,
    cluster_to_dict,
    dumps,
    job_from_dict,
    job_to_dict,
    model_from_dict,
    model_to_dict,
    parse_cluster_spec,
    parse_job_spec,
    parse_model_spec,
    validate,
)

CLUSTER = {
    "node_count": 2,
    "gpus_per_node": 8,
    "device_memory_bytes": 40e9,
    "device_peak_flops": 100e12,
    "device_efficiency": 0.5,
    "intra_node": {"bandwidth_bps": 300e9, "latency_s": 1e-6},
    "inter_node": {"bandwidth_bps": 25e9, "latency_s": 5e-6},
}


def cluster_doc(**over):
    doc = json.loads(json.dumps(CLUSTER))
    doc.update(over)
    return doc


def test_cluster_total_gpus():
    spec = parse_cluster_spec(json.dumps(CLUSTER))
    assert spec.total_gpus == 16
    assert spec.intra_node_link == LinkSpec(300e9, 1e-6)


def test_single_gpu_cluster():
    assert cluster_from_dict(cluster_doc(node_count=1, gpus_per_node=1)).total_gpus == 1


def test_zero_nodes_names_field():
    with pytest.raises(ValidationError) as err:
        cluster_from_dict(cluster_doc(node_count=0))
    assert "node_count" in str(err.value)


@pytest.mark.parametrize("field,value", [
    ("device_efficiency", 0.0),
    ("device_efficiency", 1.5),
    ("device_memory_bytes", -1),
])
def test_cluster_invariants(field, value):
    with pytest.raises(ValidationError):
        cluster_from_dict(cluster_doc(**{field: value}))


def test_link_invariants():
    with pytest.raises(ValidationError):
        cluster_from_dict(cluster_doc(intra_node={"bandwidth_bps": 0, "latency_s": 0}))
    with pytest.raises(ValidationError):
        cluster_from_dict(cluster_doc(inter_node={"bandwidth_bps": 1e9, "latency_s": -1}))


def test_unknown_key_is_hard_error():
    with pytest.raises(ParseError):
        cluster_from_dict(cluster_doc(gpus_per_nod=8))


def test_malformed_json_reports_line():
    with pytest.raises(ParseError) as err:
        parse_cluster_spec('{\n "node_count": 1,\n oops\n}')
    assert err.value.line == 3


def test_model_24_blocks_keeps_order():
    layers = []
    for _ in range(24):
        layers += [{"kind": "attention", "param_count": 4, "hidden_size": 8, "seq_len": 4},
                   {"kind": "mlp", "param_count": 8, "hidden_size": 8, "seq_len": 4}]
    spec = parse_model_spec(json.dumps({"layers": layers}))
    assert len(spec.layers) == 48
    assert [l.kind for l in spec.layers[:4]] == ["attention", "mlp", "attention", "mlp"]
    assert spec.total_params == 24 * 12


def test_model_zero_params():
    spec = model_from_dict({"layers": [{"kind": "other", "param_count": 0, "flops_fwd_per_sample": 1.0}]})
    assert spec.total_params == 0


def test_attention_formula_path_accepted():
    spec = model_from_dict({"layers": [{"kind": "attention", "param_count": 10,
                                        "hidden_size": 1024, "seq_len": 512}]})
    assert spec.layers[0].flops_fwd_per_sample is None


def test_layer_without_flops_source_rejected():
    with pytest.raises(ValidationError):
        model_from_dict({"layers": [{"kind": "attention", "param_count": 10}]})


def test_empty_layer_list_rejected():
    with pytest.raises(ValidationError):
        model_from_dict({"layers": []})


def test_job_with_event():
    job = job_from_dict({
        "global_batch_size": 512, "target_steps": 10000, "precision_bytes": 2,
        "zero_stage_allowed": 1,
        "scenario_events": [{"at_step": 5000, "kind": "stage_slowdown", "target": 2,
                             "multiplier": 1.3}],
    })
    assert job.scenario_events == (ScenarioEvent(5000, "stage_slowdown", 2, 1.3),)
    assert job.zero_stage_allowed == 1


def test_job_events_default_empty():
    assert job_from_dict({"global_batch_size": 8, "target_steps": 10}).scenario_events == ()


@pytest.mark.parametrize("event", [
    {"at_step": 11, "kind": "restore", "target": 0, "multiplier": 1.0},
    {"at_step": 1, "kind": "stage_slowdown", "target": 0, "multiplier": 0.0},
    {"at_step": 1, "kind": "bandwidth_drop", "target": "pcie", "multiplier": 0.5},
    {"at_step": 1, "kind": "meteor", "target": 0, "multiplier": 2.0},
])
def test_bad_events_rejected(event):
    with pytest.raises((ValidationError, ParseError)):
        job_from_dict({"global_batch_size": 8, "target_steps": 10, "scenario_events": [event]})


@pytest.mark.parametrize("field,value", [
    ("global_batch_size", 0), ("target_steps", 0), ("zero_stage_allowed", 4),
])
def test_job_invariants(field, value):
    doc = {"global_batch_size": 8, "target_steps": 10, field: value}
    with pytest.raises(ValidationError):
        job_from_dict(doc)


def test_selector_block_keys_checked():
    job_from_dict({"global_batch_size": 8, "target_steps": 10, "selector": {"hysteresis": 10}})
    with pytest.raises(ParseError):
        job_from_dict({"global_batch_size": 8, "target_steps": 10, "selector": {"hysterisis": 10}})


# --- validation -------------------------------------------------------------

def _small(total=4, per_node=4, memory=80e9):
    cluster = ClusterSpec(total // per_node, per_node, memory, 100e12, 0.5,
                          LinkSpec(300e9, 1e-6), LinkSpec(25e9, 5e-6))
    model = ModelSpec((LayerSpec("attention", 1000, 1e9, 1000),
                       LayerSpec("mlp", 2000, 2e9, 1000)))
    return cluster, model


def test_consistent_specs_validate_clean():
    cluster, model = _small()
    assert validate(cluster, model, JobSpec(global_batch_size=16, target_steps=10)) == []


def test_empty_model_violation():
    cluster, _ = _small()
    model = ModelSpec((LayerSpec("other", 0, 1.0),))
    problems = validate(cluster, model, JobSpec(global_batch_size=4, target_steps=1))
    assert any("empty model" in p for p in problems)


def test_odd_batch_with_memory_forced_dp_has_no_micro_batching():
    # one layer, so pp = 1; pure replication does not fit, tp is capped at 2 by the node,
    # leaving dp >= 8 which cannot split a batch of 7
    cluster = ClusterSpec(8, 2, 10e9, 100e12, 0.5, LinkSpec(300e9, 1e-6), LinkSpec(25e9, 5e-6))
    model = ModelSpec((LayerSpec("mlp", 1_000_000_000, 1e9, 1000),))
    problems = validate(cluster, model, JobSpec(global_batch_size=7, target_steps=1))
    assert problems and "no feasible micro-batching" in problems[0]


def test_validate_is_pure():
    cluster, model = _small()
    job = JobSpec(global_batch_size=7, target_steps=10)
    assert validate(cluster, model, job) == validate(cluster, model, job)


# --- round trips -------------------------------------------------------------

links = st.builds(LinkSpec, st.floats(1e6, 1e12), st.floats(0, 1e-3))
clusters = st.builds(ClusterSpec, st.integers(1, 8), st.integers(1, 8), st.floats(1e6, 1e12),
                     st.floats(1e9, 1e15), st.floats(0.01, 1.0), links, links)
layers = st.one_of(
    st.builds(LayerSpec, st.sampled_from(["attention", "mlp", "embedding", "other"]),
              st.integers(0, 10**10), st.floats(0, 1e13), st.one_of(st.none(), st.integers(0, 10**9))),
    st.builds(LayerSpec, st.sampled_from(["attention", "mlp"]), st.integers(0, 10**10),
              st.none(), st.none(), st.integers(1, 8192), st.integers(1, 8192)),
)
models = st.builds(ModelSpec, st.lists(layers, min_size=1, max_size=6).map(tuple))


@st.composite
def jobs(draw):
    steps = draw(st.integers(1, 10**6))
    events = draw(st.lists(st.one_of(
        st.builds(ScenarioEvent, st.integers(0, steps), st.just("stage_slowdown"),
                  st.integers(0, 7), st.floats(0.1, 5)),
        st.builds(ScenarioEvent, st.integers(0, steps), st.just("bandwidth_drop"),
                  st.sampled_from(["intra", "inter"]), st.floats(0.1, 5)),
        st.builds(ScenarioEvent, st.integers(0, steps), st.just("restore"),
                  st.one_of(st.integers(0, 7), st.sampled_from(["intra", "inter"])), st.just(1.0)),
    ), max_size=4))
    return JobSpec(
        global_batch_size=draw(st.integers(1, 4096)), target_steps=steps,
        precision_bytes=draw(st.sampled_from([2, 4])),
        zero_stage_allowed=draw(st.integers(0, 3)),
        loader_max_throughput=draw(st.floats(1, 1e12)),
        scenario_events=tuple(events), adaptation_enabled=draw(st.booleans()),
        seed=draw(st.integers(0, 2**31)),
        selector=tuple(sorted(draw(st.dictionaries(
            st.sampled_from(["hysteresis", "monitor_interval", "window"]),
            st.integers(1, 500), max_size=2)).items())),
    )


@settings(max_examples=60)
@given(clusters)
def test_cluster_round_trip(spec):
    assert parse_cluster_spec(dumps(cluster_to_dict(spec))) == spec


@settings(max_examples=60)
@given(models)
def test_model_round_trip(spec):
    assert parse_model_spec(dumps(model_to_dict(spec))) == spec


@settings(max_examples=60)
@given(jobs())
def test_job_round_trip(spec):
    assert parse_job_spec(dumps(job_to_dict(spec))) == spec
