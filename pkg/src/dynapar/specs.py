"""Declarative cluster / model / job documents.

Three JSON documents stand in for the live environment: the cluster (devices and
the two-tier interconnect), the model (an ordered list of layers) and the job
(batch, steps, optimizer settings and a scenario of injected events).  Unknown
keys are rejected so that a typo never silently falls back to a default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping

LAYER_KINDS = ("attention", "mlp", "embedding", "other")
EVENT_KINDS = ("stage_slowdown", "bandwidth_drop", "restore")
LINK_IDS = ("intra", "inter")
DEFAULT_LOADER_THROUGHPUT = 1e12


class SpecError(Exception):
    """Base class for problems with an input document."""


class ParseError(SpecError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class ValidationError(SpecError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass(frozen=True)
class LinkSpec:
    bandwidth: float  # bytes/s
    latency: float  # s


@dataclass(frozen=True)
class ClusterSpec:
    node_count: int
    gpus_per_node: int
    device_memory: float
    device_peak_flops: float
    device_efficiency: float
    intra_node_link: LinkSpec
    inter_node_link: LinkSpec

    @property
    def total_gpus(self) -> int:
        return self.node_count * self.gpus_per_node


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    param_count: int
    flops_fwd_per_sample: float | None = None
    activation_bytes_per_sample: int | None = None
    hidden_size: int | None = None
    seq_len: int | None = None


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]

    @property
    def total_params(self) -> int:
        return sum(layer.param_count for layer in self.layers)


@dataclass(frozen=True)
class ScenarioEvent:
    at_step: int
    kind: str
    target: int | str  # stage index, or "intra" / "inter"
    multiplier: float = 1.0


@dataclass(frozen=True)
class JobSpec:
    global_batch_size: int
    target_steps: int
    precision_bytes: int = 2
    optimizer: str = "adam"
    zero_stage_allowed: int = 0
    loader_max_throughput: float = DEFAULT_LOADER_THROUGHPUT
    scenario_events: tuple[ScenarioEvent, ...] = ()
    adaptation_enabled: bool = True
    seed: int = 0
    # optional free-form blocks, stored as sorted (key, value) pairs to stay hashable
    selector: tuple[tuple[str, Any], ...] = ()
    simulation: tuple[tuple[str, Any], ...] = ()
    comm: tuple[tuple[str, Any], ...] = ()
    search: tuple[tuple[str, Any], ...] = ()

    def block(self, name: str) -> dict[str, Any]:
        return dict(getattr(self, name))


# ---------------------------------------------------------------------------
# key schemas
# ---------------------------------------------------------------------------

_CLUSTER_KEYS = {
    "node_count", "gpus_per_node", "device_memory_bytes", "device_peak_flops",
    "device_efficiency", "intra_node", "inter_node",
}
_LINK_KEYS = {"bandwidth_bps", "latency_s"}
_LAYER_KEYS = {
    "kind", "param_count", "flops_fwd_per_sample", "activation_bytes_per_sample",
    "hidden_size", "seq_len",
}
_JOB_KEYS = {
    "global_batch_size", "target_steps", "precision_bytes", "optimizer",
    "zero_stage_allowed", "loader_max_throughput", "adaptation_enabled", "seed",
    "scenario_events", "selector", "simulation", "comm", "search",
}
_EVENT_KEYS = {"at_step", "kind", "target", "multiplier"}

# allowed keys of the optional blocks; values are checked by their consumers
SELECTOR_KEYS = {
    "comm_threshold", "util_threshold", "headroom_threshold", "imbalance_threshold",
    "hysteresis", "monitor_interval", "gain_margin", "min_relative_gain", "window",
    "full_search",
}
SIMULATION_KEYS = {"noise", "initial_loss", "loss_tau", "loss_gamma",
                   "convergence_window", "surcharge_iterations"}
COMM_KEYS = {"enable_fusion", "enable_overlap", "bucket_bytes", "overlap_factor"}
SEARCH_KEYS = {"max_micro_batch"}
_BLOCK_KEYS = {"selector": SELECTOR_KEYS, "simulation": SIMULATION_KEYS,
               "comm": COMM_KEYS, "search": SEARCH_KEYS}


def _load(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None


def _check_keys(doc: Any, allowed: set[str], required: set[str], where: str) -> None:
    if not isinstance(doc, dict):
        raise ParseError(f"expected an object, got {type(doc).__name__}", field=where)
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ParseError(f"unknown key(s) {unknown}", field=where)
    missing = sorted(required - set(doc))
    if missing:
        raise ParseError(f"missing key(s) {missing}", field=where)


def _num(doc: Mapping, key: str, where: str, integer: bool = False) -> Any:
    value = doc[key]
    name = f"{where}.{key}" if where else key
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError("expected a number", field=name)
    if integer:
        if isinstance(value, float):
            if not value.is_integer():
                raise ParseError("expected an integer", field=name)
            value = int(value)
        return value
    return float(value)


def _opt(doc: Mapping, key: str, where: str, integer: bool = False) -> Any:
    if doc.get(key) is None:
        return None
    return _num(doc, key, where, integer)


# ---------------------------------------------------------------------------
# cluster
# ---------------------------------------------------------------------------

def _parse_link(doc: Any, where: str) -> LinkSpec:
    _check_keys(doc, _LINK_KEYS, _LINK_KEYS, where)
    link = LinkSpec(_num(doc, "bandwidth_bps", where), _num(doc, "latency_s", where))
    if link.bandwidth <= 0:
        raise ValidationError(f"{where}.bandwidth_bps", "bandwidth_bps > 0")
    if link.latency < 0:
        raise ValidationError(f"{where}.latency_s", "latency_s >= 0")
    return link


def cluster_from_dict(doc: Any) -> ClusterSpec:
    _check_keys(doc, _CLUSTER_KEYS, _CLUSTER_KEYS, "cluster")
    spec = ClusterSpec(
        node_count=_num(doc, "node_count", "", integer=True),
        gpus_per_node=_num(doc, "gpus_per_node", "", integer=True),
        device_memory=_num(doc, "device_memory_bytes", ""),
        device_peak_flops=_num(doc, "device_peak_flops", ""),
        device_efficiency=_num(doc, "device_efficiency", ""),
        intra_node_link=_parse_link(doc["intra_node"], "intra_node"),
        inter_node_link=_parse_link(doc["inter_node"], "inter_node"),
    )
    if spec.node_count < 1:
        raise ValidationError("node_count", "node_count >= 1")
    if spec.gpus_per_node < 1:
        raise ValidationError("gpus_per_node", "gpus_per_node >= 1")
    if spec.device_memory <= 0:
        raise ValidationError("device_memory_bytes", "device_memory_bytes > 0")
    if spec.device_peak_flops <= 0:
        raise ValidationError("device_peak_flops", "device_peak_flops > 0")
    if not 0 < spec.device_efficiency <= 1:
        raise ValidationError("device_efficiency", "device_efficiency in (0, 1]")
    return spec


def parse_cluster_spec(text: str) -> ClusterSpec:
    return cluster_from_dict(_load(text))


def cluster_to_dict(spec: ClusterSpec) -> dict:
    def link(l: LinkSpec) -> dict:
        return {"bandwidth_bps": l.bandwidth, "latency_s": l.latency}

    return {
        "node_count": spec.node_count,
        "gpus_per_node": spec.gpus_per_node,
        "device_memory_bytes": spec.device_memory,
        "device_peak_flops": spec.device_peak_flops,
        "device_efficiency": spec.device_efficiency,
        "intra_node": link(spec.intra_node_link),
        "inter_node": link(spec.inter_node_link),
    }


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def _parse_layer(doc: Any, index: int) -> LayerSpec:
    where = f"layers[{index}]"
    _check_keys(doc, _LAYER_KEYS, {"kind", "param_count"}, where)
    kind = doc["kind"]
    if kind not in LAYER_KINDS:
        raise ParseError(f"kind must be one of {LAYER_KINDS}", field=f"{where}.kind")
    layer = LayerSpec(
        kind=kind,
        param_count=_num(doc, "param_count", where, integer=True),
        flops_fwd_per_sample=_opt(doc, "flops_fwd_per_sample", where),
        activation_bytes_per_sample=_opt(doc, "activation_bytes_per_sample", where, integer=True),
        hidden_size=_opt(doc, "hidden_size", where, integer=True),
        seq_len=_opt(doc, "seq_len", where, integer=True),
    )
    if layer.param_count < 0:
        raise ValidationError(f"{where}.param_count", "param_count >= 0")
    if layer.flops_fwd_per_sample is not None and layer.flops_fwd_per_sample < 0:
        raise ValidationError(f"{where}.flops_fwd_per_sample", "flops_fwd_per_sample >= 0")
    if layer.activation_bytes_per_sample is not None and layer.activation_bytes_per_sample < 0:
        raise ValidationError(f"{where}.activation_bytes_per_sample",
                              "activation_bytes_per_sample >= 0")
    for key in ("hidden_size", "seq_len"):
        value = getattr(layer, key)
        if value is not None and value < 1:
            raise ValidationError(f"{where}.{key}", f"{key} >= 1")
    if (layer.flops_fwd_per_sample is None and kind in ("attention", "mlp")
            and (layer.hidden_size is None or layer.seq_len is None)):
        raise ValidationError(
            where, "needs flops_fwd_per_sample or both hidden_size and seq_len")
    return layer


def model_from_dict(doc: Any) -> ModelSpec:
    _check_keys(doc, {"layers"}, {"layers"}, "model")
    layers = doc["layers"]
    if not isinstance(layers, list):
        raise ParseError("expected a list", field="layers")
    if not layers:
        raise ValidationError("layers", "at least one layer")
    return ModelSpec(tuple(_parse_layer(l, i) for i, l in enumerate(layers)))


def parse_model_spec(text: str) -> ModelSpec:
    return model_from_dict(_load(text))


def model_to_dict(spec: ModelSpec) -> dict:
    out = []
    for layer in spec.layers:
        doc: dict[str, Any] = {"kind": layer.kind, "param_count": layer.param_count}
        for key in ("flops_fwd_per_sample", "activation_bytes_per_sample", "hidden_size", "seq_len"):
            value = getattr(layer, key)
            if value is not None:
                doc[key] = value
        out.append(doc)
    return {"layers": out}


# ---------------------------------------------------------------------------
# job
# ---------------------------------------------------------------------------

def _parse_event(doc: Any, index: int) -> ScenarioEvent:
    where = f"scenario_events[{index}]"
    _check_keys(doc, _EVENT_KEYS, {"at_step", "kind", "target"}, where)
    kind = doc["kind"]
    if kind not in EVENT_KINDS:
        raise ParseError(f"kind must be one of {EVENT_KINDS}", field=f"{where}.kind")
    target = doc["target"]
    if isinstance(target, bool) or not isinstance(target, (int, str)):
        raise ParseError("expected a stage index or link id", field=f"{where}.target")
    if kind == "stage_slowdown" and not isinstance(target, int):
        raise ValidationError(f"{where}.target", "stage_slowdown targets a stage index")
    if kind == "bandwidth_drop" and target not in LINK_IDS:
        raise ValidationError(f"{where}.target", f"bandwidth_drop targets one of {LINK_IDS}")
    if isinstance(target, int) and target < 0:
        raise ValidationError(f"{where}.target", "stage index >= 0")
    if isinstance(target, str) and target not in LINK_IDS:
        raise ValidationError(f"{where}.target", f"link id must be one of {LINK_IDS}")
    multiplier = _num(doc, "multiplier", where) if "multiplier" in doc else 1.0
    if multiplier <= 0:
        raise ValidationError(f"{where}.multiplier", "multiplier > 0")
    return ScenarioEvent(_num(doc, "at_step", where, integer=True), kind, target, multiplier)


def _parse_block(doc: Mapping, name: str) -> tuple[tuple[str, Any], ...]:
    block = doc.get(name)
    if block is None:
        return ()
    _check_keys(block, _BLOCK_KEYS[name], set(), name)
    return tuple(sorted(block.items()))


def job_from_dict(doc: Any) -> JobSpec:
    _check_keys(doc, _JOB_KEYS, {"global_batch_size", "target_steps"}, "job")
    optimizer = doc.get("optimizer", "adam")
    if optimizer != "adam":
        raise ValidationError("optimizer", "only 'adam' is supported")
    adaptation = doc.get("adaptation_enabled", True)
    if not isinstance(adaptation, bool):
        raise ParseError("expected a boolean", field="adaptation_enabled")
    events = doc.get("scenario_events") or []
    if not isinstance(events, list):
        raise ParseError("expected a list", field="scenario_events")
    job = JobSpec(
        global_batch_size=_num(doc, "global_batch_size", "", integer=True),
        target_steps=_num(doc, "target_steps", "", integer=True),
        precision_bytes=_num(doc, "precision_bytes", "", integer=True) if "precision_bytes" in doc else 2,
        optimizer=optimizer,
        zero_stage_allowed=_num(doc, "zero_stage_allowed", "", integer=True) if "zero_stage_allowed" in doc else 0,
        loader_max_throughput=(_num(doc, "loader_max_throughput", "")
                               if doc.get("loader_max_throughput") is not None
                               else DEFAULT_LOADER_THROUGHPUT),
        scenario_events=tuple(_parse_event(e, i) for i, e in enumerate(events)),
        adaptation_enabled=adaptation,
        seed=_num(doc, "seed", "", integer=True) if "seed" in doc else 0,
        selector=_parse_block(doc, "selector"),
        simulation=_parse_block(doc, "simulation"),
        comm=_parse_block(doc, "comm"),
        search=_parse_block(doc, "search"),
    )
    if job.global_batch_size < 1:
        raise ValidationError("global_batch_size", "global_batch_size >= 1")
    if job.target_steps < 1:
        raise ValidationError("target_steps", "target_steps >= 1")
    if job.precision_bytes not in (2, 4):
        raise ValidationError("precision_bytes", "precision_bytes in {2, 4}")
    if job.zero_stage_allowed not in (0, 1, 2, 3):
        raise ValidationError("zero_stage_allowed", "zero_stage_allowed in {0, 1, 2, 3}")
    if job.loader_max_throughput <= 0:
        raise ValidationError("loader_max_throughput", "loader_max_throughput > 0")
    for i, event in enumerate(job.scenario_events):
        if not 0 <= event.at_step <= job.target_steps:
            raise ValidationError(f"scenario_events[{i}].at_step",
                                  "at_step within [0, target_steps]")
    return job


def parse_job_spec(text: str) -> JobSpec:
    return job_from_dict(_load(text))


def job_to_dict(job: JobSpec) -> dict:
    doc: dict[str, Any] = {
        "global_batch_size": job.global_batch_size,
        "target_steps": job.target_steps,
        "precision_bytes": job.precision_bytes,
        "optimizer": job.optimizer,
        "zero_stage_allowed": job.zero_stage_allowed,
        "loader_max_throughput": job.loader_max_throughput,
        "adaptation_enabled": job.adaptation_enabled,
        "seed": job.seed,
        "scenario_events": [
            {"at_step": e.at_step, "kind": e.kind, "target": e.target, "multiplier": e.multiplier}
            for e in job.scenario_events
        ],
    }
    for name in _BLOCK_KEYS:
        block = job.block(name)
        if block:
            doc[name] = block
    return doc


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2) + "\n"


def load_file(path: str, parser) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None
    return parser(text)


# ---------------------------------------------------------------------------
# cross-spec validation
# ---------------------------------------------------------------------------

def validate(cluster: ClusterSpec, model: ModelSpec, job: JobSpec) -> list[str]:
    """Cross-document checks.  Returns human-readable violations; empty means plannable."""
    violations = structural_violations(cluster, model, job)
    if violations:
        return violations
    problem = feasibility_problem(cluster, model, job)
    return [problem] if problem else []


def feasibility_problem(cluster: ClusterSpec, model: ModelSpec, job: JobSpec) -> str | None:
    """Why no strategy can run, or None; assumes the documents are structurally sound."""
    # late imports: the feasibility scan needs the profilers and the candidate rules
    from .profilers import profile_dataset, profile_hardware, profile_model
    from .search import feasibility_scan

    return feasibility_scan(profile_hardware(cluster), profile_model(model, job.precision_bytes),
                            profile_dataset(job), job)


def structural_violations(cluster: ClusterSpec, model: ModelSpec, job: JobSpec) -> list[str]:
    from .profilers import layer_flops

    violations: list[str] = []
    if model.total_params == 0:
        violations.append("empty model: total_params is 0")
    for i, layer in enumerate(model.layers):
        try:
            layer_flops(layer)
        except ValueError as exc:
            violations.append(f"layers[{i}]: {exc}")
    total = cluster.total_gpus
    if total & (total - 1):
        violations.append(f"total_gpus={total} is not a power of two")
    for i, event in enumerate(job.scenario_events):
        if event.kind == "stage_slowdown" and event.target >= min(total, len(model.layers)):
            violations.append(f"scenario_events[{i}]: stage {event.target} cannot exist")
    return violations
