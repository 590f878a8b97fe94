"""Randomised cross-check of ``discover`` against ``exhaustive_plan``."""

from __future__ import annotations

import os
import random
from dataclasses import dataclass

from .profilers import profile_dataset, profile_hardware, profile_model
from .search import NoFeasibleStrategy, SearchResult, discover, exhaustive_plan
from .specs import (
    ClusterSpec,
    JobSpec,
    LayerSpec,
    LinkSpec,
    ModelSpec,
    cluster_to_dict,
    dumps,
    job_to_dict,
    model_to_dict,
)


@dataclass
class Instance:
    cluster: ClusterSpec
    model: ModelSpec
    job: JobSpec


@dataclass
class Comparison:
    instance: Instance
    discovered: SearchResult | None
    reference: SearchResult | None

    @property
    def agrees(self) -> bool:
        if self.discovered is None or self.reference is None:
            return self.discovered is None and self.reference is None
        return self.discovered.best_cost.total_s == self.reference.best_cost.total_s


def random_instance(rng: random.Random, max_gpus: int = 8, max_layers: int = 6,
                    cluster: ClusterSpec | None = None) -> Instance:
    if cluster is None:
        total = rng.choice([g for g in (1, 2, 4, 8, 16) if g <= max_gpus])
        per_node = rng.choice([g for g in (1, 2, 4, 8, 16) if g <= total])
        cluster = ClusterSpec(
            node_count=total // per_node,
            gpus_per_node=per_node,
            device_memory=0.0,  # filled in below, relative to the model
            device_peak_flops=rng.uniform(50e12, 300e12),
            device_efficiency=rng.uniform(0.3, 0.9),
            intra_node_link=LinkSpec(rng.uniform(50e9, 600e9), rng.uniform(0.0, 5e-6)),
            inter_node_link=LinkSpec(rng.uniform(5e9, 50e9), rng.uniform(1e-6, 2e-5)),
        )
        fixed_memory = False
    else:
        fixed_memory = True
    layers = []
    for _ in range(rng.randint(1, max_layers)):
        layers.append(LayerSpec(
            kind=rng.choice(["attention", "mlp", "embedding", "other"]),
            param_count=rng.randint(1_000, 600_000_000),
            flops_fwd_per_sample=rng.uniform(1e8, 5e10),
            activation_bytes_per_sample=rng.randint(10_000, 50_000_000),
        ))
    model = ModelSpec(tuple(layers))
    if not fixed_memory:
        per_device = 16.0 * model.total_params / cluster.total_gpus
        memory = max(1e6, rng.uniform(0.3, 4.0) * per_device)
        cluster = ClusterSpec(cluster.node_count, cluster.gpus_per_node, memory,
                              cluster.device_peak_flops, cluster.device_efficiency,
                              cluster.intra_node_link, cluster.inter_node_link)
    comm = (("enable_fusion", rng.random() < 0.5), ("enable_overlap", rng.random() < 0.5))
    job = JobSpec(
        global_batch_size=rng.choice([1, 2, 3, 4, 8, 12, 16, 32, 64]),
        target_steps=100,
        zero_stage_allowed=rng.randint(0, 3),
        comm=tuple(sorted(comm)),
        search=(("max_micro_batch", 8),),  # at most four options: 1, 2, 4, 8
        seed=rng.randint(0, 2**31 - 1),
    )
    return Instance(cluster, model, job)


def compare(instance: Instance) -> Comparison:
    hw = profile_hardware(instance.cluster)
    model = profile_model(instance.model, instance.job.precision_bytes)
    dataset = profile_dataset(instance.job)
    results = []
    # the reference honours the large-model pipeline rule so that both sides search the same space
    for search in (discover, lambda *a: exhaustive_plan(*a, heuristics=True)):
        try:
            results.append(search(hw, model, dataset, instance.job))
        except NoFeasibleStrategy:
            results.append(None)
    return Comparison(instance, results[0], results[1])


def dump_instance(instance: Instance, directory: str) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, doc in (("cluster", cluster_to_dict(instance.cluster)),
                      ("model", model_to_dict(instance.model)),
                      ("job", job_to_dict(instance.job))):
        path = os.path.join(directory, f"{name}.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(dumps(doc))
        paths.append(path)
    return paths
