"""Hardware, model and dataset profiles derived from the input documents."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

from .specs import ClusterSpec, JobSpec, LayerSpec, LinkSpec, ModelSpec

TP_SHARDABLE_KINDS = ("attention", "mlp", "embedding")


@dataclass(frozen=True)
class HardwareProfile:
    total_gpus: int
    gpus_per_node: int
    device_memory: float
    effective_flops: float
    intra: LinkSpec
    inter: LinkSpec

    @property
    def node_count(self) -> int:
        return self.total_gpus // self.gpus_per_node

    def node_of(self, device: int) -> int:
        return device // self.gpus_per_node

    def link(self, a: int, b: int) -> LinkSpec:
        return self.intra if self.node_of(a) == self.node_of(b) else self.inter

    def group_link(self, devices: Iterable[int]) -> LinkSpec:
        """Link a collective over ``devices`` is bottlenecked by."""
        nodes = {self.node_of(d) for d in devices}
        return self.intra if len(nodes) <= 1 else self.inter

    def scaled(self, intra: float = 1.0, inter: float = 1.0) -> "HardwareProfile":
        """Copy with link bandwidths multiplied by the given factors."""
        if intra == 1.0 and inter == 1.0:
            return self
        return replace(
            self,
            intra=LinkSpec(self.intra.bandwidth * intra, self.intra.latency),
            inter=LinkSpec(self.inter.bandwidth * inter, self.inter.latency),
        )


@dataclass(frozen=True)
class LayerProfile:
    index: int
    kind: str
    param_count: int
    flops_fwd: float  # per sample
    activation_bytes: float  # per sample
    tp_shardable: bool

    @property
    def flops_bwd(self) -> float:
        return 2.0 * self.flops_fwd


@dataclass(frozen=True)
class ModelProfile:
    layers: tuple[LayerProfile, ...]
    precision_bytes: int = 2

    @property
    def total_params(self) -> int:
        return sum(l.param_count for l in self.layers)

    @property
    def total_flops_fwd(self) -> float:
        return sum(l.flops_fwd for l in self.layers)

    def __len__(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class DatasetProfile:
    max_input_throughput: float
    global_batch_size: int


def profile_hardware(cluster: ClusterSpec) -> HardwareProfile:
    return HardwareProfile(
        total_gpus=cluster.total_gpus,
        gpus_per_node=cluster.gpus_per_node,
        device_memory=cluster.device_memory,
        effective_flops=cluster.device_peak_flops * cluster.device_efficiency,
        intra=cluster.intra_node_link,
        inter=cluster.inter_node_link,
    )


def layer_flops(layer: LayerSpec) -> float:
    """Forward FLOPs per sample; an explicit value always wins over the estimate."""
    if layer.flops_fwd_per_sample is not None:
        return float(layer.flops_fwd_per_sample)
    h, s = layer.hidden_size, layer.seq_len
    if layer.kind in ("attention", "mlp") and h is not None and s is not None:
        if layer.kind == "attention":
            # QKV + output projections, then QK^T and AV
            return float(8 * s * h * h + 4 * s * s * h)
        # 4h expansion: two matmuls of 2*s*h*4h each
        return float(16 * s * h * h)
    raise ValueError(f"cannot derive FLOPs for a '{layer.kind}' layer without "
                     "flops_fwd_per_sample (or hidden_size and seq_len)")


def profile_model(model: ModelSpec, precision_bytes: int = 2) -> ModelProfile:
    layers = []
    for i, spec in enumerate(model.layers):
        if spec.activation_bytes_per_sample is not None:
            act = float(spec.activation_bytes_per_sample)
        elif spec.hidden_size is not None and spec.seq_len is not None:
            act = float(spec.seq_len * spec.hidden_size * precision_bytes)
        else:
            act = 0.0
        layers.append(LayerProfile(
            index=i,
            kind=spec.kind,
            param_count=spec.param_count,
            flops_fwd=layer_flops(spec),
            activation_bytes=act,
            tp_shardable=spec.kind in TP_SHARDABLE_KINDS,
        ))
    return ModelProfile(tuple(layers), precision_bytes)


def profile_dataset(job: JobSpec) -> DatasetProfile:
    return DatasetProfile(job.loader_max_throughput, job.global_batch_size)
