"""Analytic time and memory model for a (dp, tp, pp) layout.

Communication follows the latency-bandwidth model.  The pipeline is a
synchronous GPipe schedule accounted on its slowest stage.  Device ranks are
laid out tensor-parallel fastest, then data-parallel, then pipeline stage:
``rank = stage * dp * tp + dp_rank * tp + tp_rank``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Sequence

from .comm import CommPlan
from .profilers import DatasetProfile, HardwareProfile, LayerProfile, ModelProfile
from .specs import LinkSpec


class ConfigError(ValueError):
    """A ParallelismConfig breaks one of its structural invariants."""


class LayerStrategy(str, Enum):
    TENSOR_PARALLEL = "tensor_parallel"
    DATA_REPLICATED = "data_replicated"


TP = LayerStrategy.TENSOR_PARALLEL
DR = LayerStrategy.DATA_REPLICATED


@dataclass(frozen=True)
class ParallelismConfig:
    dp: int
    tp: int
    pp: int
    micro_batch_size: int
    num_micro_batches: int
    stage_boundaries: tuple[int, ...]
    layer_strategies: tuple[LayerStrategy, ...]
    zero_stage: int = 0

    @property
    def triple(self) -> tuple[int, int, int]:
        return (self.dp, self.tp, self.pp)

    @property
    def global_batch_size(self) -> int:
        return self.dp * self.micro_batch_size * self.num_micro_batches

    def stage_of(self, layer: int) -> int:
        for k in range(self.pp):
            if layer < self.stage_boundaries[k + 1]:
                return k
        raise IndexError(layer)

    def stage_layers(self, k: int) -> range:
        return range(self.stage_boundaries[k], self.stage_boundaries[k + 1])

    @property
    def config_id(self) -> str:
        layout = json.dumps([list(self.stage_boundaries), [s.value for s in self.layer_strategies]])
        digest = hashlib.sha1(layout.encode()).hexdigest()[:8]
        return (f"dp{self.dp}-tp{self.tp}-pp{self.pp}-mb{self.micro_batch_size}"
                f"-z{self.zero_stage}-{digest}")

    def to_dict(self) -> dict:
        return {
            "dp": self.dp,
            "tp": self.tp,
            "pp": self.pp,
            "micro_batch_size": self.micro_batch_size,
            "num_micro_batches": self.num_micro_batches,
            "stage_boundaries": list(self.stage_boundaries),
            "layer_strategies": [s.value for s in self.layer_strategies],
            "zero_stage": self.zero_stage,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParallelismConfig":
        keys = {"dp", "tp", "pp", "micro_batch_size", "num_micro_batches",
                "stage_boundaries", "layer_strategies", "zero_stage"}
        if not isinstance(doc, dict) or set(doc) != keys:
            raise ConfigError(f"plan document must have exactly the keys {sorted(keys)}")
        try:
            return cls(
                dp=int(doc["dp"]), tp=int(doc["tp"]), pp=int(doc["pp"]),
                micro_batch_size=int(doc["micro_batch_size"]),
                num_micro_batches=int(doc["num_micro_batches"]),
                stage_boundaries=tuple(int(b) for b in doc["stage_boundaries"]),
                layer_strategies=tuple(LayerStrategy(s) for s in doc["layer_strategies"]),
                zero_stage=int(doc["zero_stage"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed plan document: {exc}") from None


@dataclass(frozen=True)
class CostBreakdown:
    compute_s: float
    tp_comm_s: float
    dp_sync_s: float
    p2p_s: float
    bubble_s: float
    transition_s: float
    total_s: float
    throughput: float
    comm_fraction: float
    stage_times: tuple[float, ...] = ()
    critical_stage: int = 0

    @property
    def pipeline_span_s(self) -> float:
        return self.compute_s + self.tp_comm_s + self.bubble_s

    @property
    def stage_imbalance(self) -> float:
        if not self.stage_times:
            return 0.0
        mean = math.fsum(self.stage_times) / len(self.stage_times)
        return max(self.stage_times) / mean - 1.0 if mean > 0 else 0.0


@dataclass(frozen=True)
class MemoryFootprint:
    model_state_bytes: float
    activation_bytes: float
    total_bytes: float
    headroom_fraction: float
    stage: int = 0


def is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def check_config(config: ParallelismConfig, total_gpus: int, num_layers: int,
                 global_batch: int | None = None, model: ModelProfile | None = None,
                 pow2: bool = True) -> None:
    c = config
    if min(c.dp, c.tp, c.pp, c.micro_batch_size, c.num_micro_batches) < 1:
        raise ConfigError("degrees, micro_batch_size and num_micro_batches must be >= 1")
    if pow2 and not (is_pow2(c.dp) and is_pow2(c.tp) and is_pow2(c.pp)):
        raise ConfigError(f"degrees must be powers of two, got {c.triple}")
    if c.dp * c.tp * c.pp != total_gpus:
        raise ConfigError(f"dp*tp*pp = {c.dp * c.tp * c.pp} != total_gpus {total_gpus}")
    if global_batch is not None and c.global_batch_size != global_batch:
        raise ConfigError(f"dp*micro_batch*num_micro_batches = {c.global_batch_size} "
                          f"!= global batch {global_batch}")
    b = c.stage_boundaries
    if len(b) != c.pp + 1 or b[0] != 0 or b[-1] != num_layers:
        raise ConfigError(f"stage_boundaries {list(b)} must run 0..{num_layers} in {c.pp} stages")
    if any(x >= y for x, y in zip(b, b[1:])):
        raise ConfigError(f"stage_boundaries {list(b)} must be strictly increasing")
    if len(c.layer_strategies) != num_layers:
        raise ConfigError("one layer strategy per layer is required")
    if c.tp == 1 and any(s is TP for s in c.layer_strategies):
        raise ConfigError("tp=1 requires every layer to be data_replicated")
    if model is not None:
        for layer, s in zip(model.layers, c.layer_strategies):
            if s is TP and not layer.tp_shardable:
                raise ConfigError(f"layer {layer.index} ({layer.kind}) is not tensor-shardable")
    if c.zero_stage not in (0, 1, 2, 3):
        raise ConfigError("zero_stage must be 0..3")


# ---------------------------------------------------------------------------
# primitive costs
# ---------------------------------------------------------------------------

def ring_allreduce_time(nbytes: float, n: int, link: LinkSpec, messages: int = 1) -> float:
    if n <= 1:
        return 0.0
    return 2.0 * (n - 1) / n * nbytes / link.bandwidth + messages * 2.0 * (n - 1) * link.latency


def p2p_time(nbytes: float, link: LinkSpec) -> float:
    return nbytes / link.bandwidth + link.latency


def layer_compute_time(layer: LayerProfile, strategy: LayerStrategy, tp: int,
                       micro_batch: int, hw: HardwareProfile) -> float:
    """Forward plus backward seconds for one micro-batch."""
    divisor = tp if strategy is TP else 1
    return (layer.flops_fwd + layer.flops_bwd) * micro_batch / (hw.effective_flops * divisor)


def tp_activation_comm_time(layer: LayerProfile, strategy: LayerStrategy, tp: int,
                            micro_batch: int, link: LinkSpec) -> float:
    # embeddings are split along the vocabulary and carry no extra collectives
    if tp == 1 or strategy is not TP or layer.kind == "embedding":
        return 0.0
    # two all-reduces forward, two backward
    return 4.0 * ring_allreduce_time(layer.activation_bytes * micro_batch, tp, link)


def conversion_time(activation_bytes: float, micro_batch: int, tp: int, link: LinkSpec) -> float:
    """Re-layout of the activation between differently sharded neighbours (an all-gather)."""
    return ring_allreduce_time(activation_bytes * micro_batch, tp, link) / 2.0


def dp_gradient_sync_time(grad_bytes: float, dp: int, link: LinkSpec,
                          comm_plan: CommPlan | None = None,
                          backward_compute_s: float = 0.0, num_tensors: int = 1) -> float:
    """Exposed seconds of the gradient all-reduce after fusion and overlap."""
    if dp <= 1:
        return 0.0
    messages = comm_plan.message_count(num_tensors, grad_bytes) if comm_plan else 1
    raw = ring_allreduce_time(grad_bytes, dp, link, messages)
    if comm_plan is not None and comm_plan.overlap_enabled:
        return max(0.0, raw - comm_plan.overlap_factor * backward_compute_s)
    return raw


def pipeline_bubble_fraction(pp: int, num_micro_batches: int) -> float:
    if pp < 1 or num_micro_batches < 1:
        raise ValueError("pp and num_micro_batches must be >= 1")
    return (pp - 1) / (num_micro_batches + pp - 1)


# ---------------------------------------------------------------------------
# device groups
# ---------------------------------------------------------------------------

@lru_cache(maxsize=4096)
def group_links(hw: HardwareProfile, dp: int, tp: int, pp: int
                ) -> tuple[tuple[LinkSpec, ...], tuple[LinkSpec, ...], tuple[LinkSpec, ...]]:
    """Per-stage tp-group link, per-stage dp-group link, per-boundary p2p link."""
    block = dp * tp
    tp_links, dp_links, p2p_links = [], [], []
    for k in range(pp):
        base = k * block
        tp_groups = [range(base + r * tp, base + (r + 1) * tp) for r in range(dp)]
        dp_groups = [range(base + t, base + block, tp) for t in range(tp)]
        tp_links.append(_worst(hw, tp_groups))
        dp_links.append(_worst(hw, dp_groups))
        if k + 1 < pp:
            p2p_links.append(_worst(hw, [(base + i, base + block + i) for i in range(block)]))
    return tuple(tp_links), tuple(dp_links), tuple(p2p_links)


def _worst(hw: HardwareProfile, groups) -> LinkSpec:
    links = [hw.group_link(g) for g in groups]
    return hw.inter if any(l is hw.inter for l in links) else hw.intra


def stage_link(hw: HardwareProfile, config: ParallelismConfig, k: int) -> LinkSpec:
    return group_links(hw, config.dp, config.tp, config.pp)[0][k]


# ---------------------------------------------------------------------------
# memory
# ---------------------------------------------------------------------------

def bytes_per_param(zero_stage: int, dp: int, precision_bytes: int = 2) -> float:
    weights = grads = float(precision_bytes)
    # fp32 master copy + Adam moments under mixed precision, moments only in fp32
    optimizer = 16.0 - 2.0 * precision_bytes
    if zero_stage == 0:
        return weights + grads + optimizer
    if zero_stage == 1:
        return weights + grads + optimizer / dp
    if zero_stage == 2:
        return weights + (grads + optimizer) / dp
    if zero_stage == 3:
        return (weights + grads + optimizer) / dp
    raise ValueError(f"zero_stage must be 0..3, got {zero_stage}")


def stage_params(config: ParallelismConfig, model: ModelProfile, k: int) -> float:
    return math.fsum(
        model.layers[i].param_count / config.tp if config.layer_strategies[i] is TP
        else model.layers[i].param_count
        for i in config.stage_layers(k)
    )


def stage_memory(params_dev: float, activation_per_sample: float, micro_batch: int,
                 pp: int, zero_stage: int, dp: int, precision_bytes: int) -> tuple[float, float]:
    """(model-state bytes, activation bytes) held by one device of a stage."""
    return (bytes_per_param(zero_stage, dp, precision_bytes) * params_dev,
            micro_batch * activation_per_sample * pp)


def memory_footprint(config: ParallelismConfig, model: ModelProfile,
                     hw: HardwareProfile) -> MemoryFootprint:
    """Footprint of the most loaded device (ties go to the lowest stage)."""
    worst = None
    for k in range(config.pp):
        act = math.fsum(model.layers[i].activation_bytes for i in config.stage_layers(k))
        states, acts = stage_memory(stage_params(config, model, k), act, config.micro_batch_size,
                                    config.pp, config.zero_stage, config.dp, model.precision_bytes)
        total = states + acts
        if worst is None or total > worst[2]:
            worst = (states, acts, total, k)
    states, acts, total, k = worst
    return MemoryFootprint(states, acts, total, (hw.device_memory - total) / hw.device_memory, k)


# ---------------------------------------------------------------------------
# iteration estimate
# ---------------------------------------------------------------------------

def p2p_message_bytes(model: ModelProfile, micro_batch: int) -> float:
    # stage-boundary tensor sized by the widest activation, so it does not depend on the cut
    return micro_batch * max(l.activation_bytes for l in model.layers)


def stage_terms(config: ParallelismConfig, model: ModelProfile, hw: HardwareProfile,
                k: int) -> tuple[float, float]:
    """(compute, tp-communication incl. conversions) seconds of stage ``k`` per micro-batch."""
    link = stage_link(hw, config, k)
    tp, mb = config.tp, config.micro_batch_size
    compute, comm = [], []
    prev = None
    for i in config.stage_layers(k):
        layer, s = model.layers[i], config.layer_strategies[i]
        compute.append(layer_compute_time(layer, s, tp, mb, hw))
        comm.append(tp_activation_comm_time(layer, s, tp, mb, link))
        if prev is not None and s is not prev:
            comm.append(conversion_time(model.layers[i - 1].activation_bytes, mb, tp, link))
        prev = s
    return math.fsum(compute), math.fsum(comm)


def estimate_iteration(config: ParallelismConfig, hw: HardwareProfile, model: ModelProfile,
                       dataset: DatasetProfile, comm_plan: CommPlan | None = None,
                       stage_scale: Sequence[float] | None = None,
                       check: bool = True) -> CostBreakdown:
    """Per-iteration time of ``config``; ``stage_scale`` slows individual stages down."""
    if check:
        check_config(config, hw.total_gpus, len(model), dataset.global_batch_size, model)
    pp, m = config.pp, config.num_micro_batches
    scale = tuple(stage_scale) if stage_scale is not None else (1.0,) * pp
    if len(scale) != pp:
        raise ConfigError(f"stage_scale needs {pp} entries")

    terms = [stage_terms(config, model, hw, k) for k in range(pp)]
    stage_times = tuple(scale[k] * (c + t) for k, (c, t) in enumerate(terms))
    crit = max(range(pp), key=lambda k: (stage_times[k], -k))
    slot = stage_times[crit]
    compute_s = m * scale[crit] * terms[crit][0]
    tp_comm_s = m * scale[crit] * terms[crit][1]
    bubble_s = (pp - 1) * slot

    _, dp_links, p2p_links = group_links(hw, config.dp, config.tp, pp)
    msg = p2p_message_bytes(model, config.micro_batch_size)
    # activations forward and gradients backward across every boundary on the critical path
    p2p_s = 2.0 * math.fsum(p2p_time(msg, link) for link in p2p_links)

    # buckets can only overlap with the backward part of the last micro-batch slot
    backward_window = 2.0 / 3.0 * slot
    raw = 0.0
    if config.dp > 1:
        for k in range(pp):
            layers = config.stage_layers(k)
            grad_bytes = stage_params(config, model, k) * model.precision_bytes
            tensors = sum(1 for i in layers if model.layers[i].param_count > 0)
            raw = max(raw, dp_gradient_sync_time(grad_bytes, config.dp, dp_links[k],
                                                 _no_overlap(comm_plan), 0.0, tensors))
    dp_sync_s = raw
    if comm_plan is not None and comm_plan.overlap_enabled:
        dp_sync_s = max(0.0, raw - comm_plan.overlap_factor * backward_window)

    total = compute_s + tp_comm_s + dp_sync_s + p2p_s + bubble_s + 0.0
    throughput = dataset.global_batch_size / total if total > 0 else math.inf
    throughput = min(throughput, dataset.max_input_throughput)
    comm_fraction = (tp_comm_s + dp_sync_s + p2p_s) / total if total > 0 else 0.0
    return CostBreakdown(compute_s, tp_comm_s, dp_sync_s, p2p_s, bubble_s, 0.0, total,
                         throughput, comm_fraction, stage_times, crit)


def _no_overlap(plan: CommPlan | None) -> CommPlan | None:
    if plan is None or not plan.overlap_enabled:
        return plan
    return CommPlan(plan.fusion_enabled, plan.bucket_bytes, False, 0.0)
