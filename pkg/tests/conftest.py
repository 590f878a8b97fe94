import os

import pytest

from dynapar.cost_model import DR, ParallelismConfig
from dynapar.profilers import (
    DatasetProfile,
    HardwareProfile,
    LayerProfile,
    ModelProfile,
    profile_dataset,
    profile_hardware,
    profile_model,
)
from dynapar.specs import LinkSpec, load_file, parse_cluster_spec, parse_job_spec, parse_model_spec

FIXTURES = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "fixtures")

INTRA = LinkSpec(300e9, 1e-6)
INTER = LinkSpec(25e9, 5e-6)


def fixture_path(*parts):
    return os.path.join(FIXTURES, *parts)


def load_fixture(name):
    cluster = load_file(fixture_path(name, "cluster.json"), parse_cluster_spec)
    model = load_file(fixture_path(name, "model.json"), parse_model_spec)
    job = load_file(fixture_path(name, "job.json"), parse_job_spec)
    return cluster, model, job


def profiles_for(name):
    cluster, model, job = load_fixture(name)
    return (profile_hardware(cluster), profile_model(model, job.precision_bytes),
            profile_dataset(job), job)


def make_hw(total=1, per_node=None, memory=80e9, flops=50e12, intra=INTRA, inter=INTER):
    return HardwareProfile(total, per_node or total, memory, flops, intra, inter)


def make_model(params, flops=1e9, act=1e6, kinds=None, precision=2):
    kinds = kinds or ["attention"] * len(params)
    layers = tuple(
        LayerProfile(i, kinds[i], params[i], flops, act, kinds[i] in ("attention", "mlp", "embedding"))
        for i in range(len(params))
    )
    return ModelProfile(layers, precision)


def make_dataset(gb, cap=1e12):
    return DatasetProfile(cap, gb)


def equal_config(dp, tp, pp, n_layers, mb=1, m=1, strategies=None, zero=0):
    bounds = tuple(k * n_layers // pp for k in range(pp + 1))
    return ParallelismConfig(dp, tp, pp, mb, m, bounds, strategies or (DR,) * n_layers, zero)


@pytest.fixture(scope="session")
def slowdown_profiles():
    return profiles_for("slowdown")
