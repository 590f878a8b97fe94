"""Runtime re-planning: diagnose bottlenecks from a metric window and decide
whether switching to a nearby configuration pays for its transition pause."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .comm import CommPlan
from .cost_model import (
    DR,
    TP,
    ConfigError,
    CostBreakdown,
    ParallelismConfig,
    check_config,
    estimate_iteration,
    group_links,
    layer_compute_time,
    tp_activation_comm_time,
)
from .layout import TransitionPlan, plan_transition
from .profilers import DatasetProfile, HardwareProfile, ModelProfile
from .search import NoFeasibleStrategy, _lowest_zero, assign_layer_strategies, discover, partition_stages
from .specs import JobSpec
from .trace import MetricsSnapshot

COMM_BOUND = "comm_bound"
UNDERUTILIZED = "underutilized"
MEMORY_HEADROOM = "memory_headroom"
STAGE_IMBALANCED = "stage_imbalanced"
INPUT_BOUND = "input_bound"
FLAG_ORDER = (COMM_BOUND, UNDERUTILIZED, MEMORY_HEADROOM, STAGE_IMBALANCED, INPUT_BOUND)


@dataclass(frozen=True)
class SelectorConfig:
    comm_threshold: float = 0.30
    util_threshold: float = 0.60
    headroom_threshold: float = 0.40
    imbalance_threshold: float = 0.15
    hysteresis: int = 200
    monitor_interval: int = 50
    gain_margin: float = 0.05
    min_relative_gain: float = 0.05
    window: int = 50
    full_search: bool = False

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any] | None) -> "SelectorConfig":
        doc = dict(doc or {})
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown selector keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class BottleneckReport:
    flags: frozenset[str]
    mean_comm_fraction: float
    mean_gpu_utilization: float
    mean_headroom_fraction: float
    mean_stage_imbalance: float

    @property
    def ordered_flags(self) -> tuple[str, ...]:
        return tuple(f for f in FLAG_ORDER if f in self.flags)


@dataclass(frozen=True)
class Decision:
    action: str  # "keep" or "transition"
    to_config: ParallelismConfig | None = None
    expected_gain_s_per_step: float = 0.0
    flags: tuple[str, ...] = ()
    plan: TransitionPlan | None = None
    evaluated: bool = False

    @property
    def is_transition(self) -> bool:
        return self.action == "transition"


KEEP = Decision("keep")


@dataclass(frozen=True)
class Profiles:
    """Static inputs the selector evaluates candidates against."""
    hw: HardwareProfile
    model: ModelProfile
    dataset: DatasetProfile
    job: JobSpec
    comm_plan: CommPlan | None = None
    surcharge_iterations: float = 2.0


@dataclass
class SelectorState:
    config: SelectorConfig
    remaining_steps: int
    last_transition_step: int = 0
    window: deque = field(default_factory=deque)
    # (step, config_id left, config_id entered)
    history: list[tuple[int, str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.window = deque(self.window, maxlen=self.config.window)

    def record_transition(self, step: int, from_id: str, to_id: str) -> None:
        self.last_transition_step = step
        self.history.append((step, from_id, to_id))
        self.window.clear()


def observe(window: Sequence[MetricsSnapshot], thresholds: SelectorConfig | None = None) -> BottleneckReport:
    if not window:
        raise ValueError("observe needs at least one snapshot")
    t = thresholds or SelectorConfig()
    n = len(window)
    comm = math.fsum(s.comm_fraction for s in window) / n
    util = math.fsum(s.gpu_utilization for s in window) / n
    headroom = math.fsum(s.headroom_fraction for s in window) / n
    imbalance = math.fsum(s.stage_imbalance for s in window) / n
    flags = set()
    if comm > t.comm_threshold:
        flags.add(COMM_BOUND)
    if util < t.util_threshold:
        flags.add(UNDERUTILIZED)
    if headroom > t.headroom_threshold:
        flags.add(MEMORY_HEADROOM)
    if imbalance > t.imbalance_threshold:
        flags.add(STAGE_IMBALANCED)
    if all(s.input_bound for s in window):
        flags.add(INPUT_BOUND)
    return BottleneckReport(frozenset(flags), comm, util, headroom, imbalance)


# ---------------------------------------------------------------------------
# candidates
# ---------------------------------------------------------------------------

def stage_scale_for(device_slowdown: Sequence[float], config: ParallelismConfig) -> tuple[float, ...]:
    """A stage runs at the pace of its slowest device."""
    if not device_slowdown:
        return (1.0,) * config.pp
    block = config.dp * config.tp
    return tuple(max(device_slowdown[k * block:(k + 1) * block]) for k in range(config.pp))


def reconfigure(dp: int, tp: int, pp: int, mb: int, profiles: Profiles,
                device_slowdown: Sequence[float] = (), link_scale=(1.0, 1.0)) -> ParallelismConfig | None:
    """Drift-aware config for a degree triple and micro-batch, or None if it cannot run."""
    hw = profiles.hw.scaled(*link_scale)
    model, job = profiles.model, profiles.job
    gb = profiles.dataset.global_batch_size
    if min(dp, tp, pp, mb) < 1 or dp * tp * pp != hw.total_gpus or pp > len(model):
        return None
    if tp > hw.gpus_per_node or gb % (dp * mb):
        return None
    links = group_links(hw, dp, tp, pp)[0]
    link = hw.inter if hw.inter in links else hw.intra
    # per-layer cost in its cheaper mode on the worst tp link, ignoring conversions
    costs = []
    for layer in model.layers:
        c = layer_compute_time(layer, DR, tp, mb, hw)
        if tp > 1 and layer.tp_shardable:
            c = min(c, layer_compute_time(layer, TP, tp, mb, hw)
                    + tp_activation_comm_time(layer, TP, tp, mb, link))
        costs.append(c)
    probe = ParallelismConfig(dp, tp, pp, mb, gb // (dp * mb), (0,) * (pp + 1), (DR,) * len(model))
    scale = stage_scale_for(device_slowdown, probe)
    bounds = tuple(partition_stages(costs, pp, list(scale)))
    strategies = assign_layer_strategies((dp, tp, pp), bounds, mb, hw, model)
    config = ParallelismConfig(dp, tp, pp, mb, gb // (dp * mb), bounds, strategies)
    try:
        check_config(config, hw.total_gpus, len(model), gb, model)
    except ConfigError:
        return None
    fitted = _lowest_zero(config, model, hw, job.zero_stage_allowed)
    return fitted[0] if fitted else None


def candidates(report: BottleneckReport, current: ParallelismConfig, profiles: Profiles,
               device_slowdown: Sequence[float] = (), link_scale=(1.0, 1.0),
               full_search: bool = False) -> list[ParallelismConfig]:
    dp, tp, pp, mb = current.dp, current.tp, current.pp, current.micro_batch_size
    wanted: list[tuple[int, int, int, int]] = []
    if COMM_BOUND in report.flags and dp >= 2:
        wanted += [(dp // 2, tp * 2, pp, mb), (dp // 2, tp, pp * 2, mb)]
    if STAGE_IMBALANCED in report.flags:
        wanted.append((dp, tp, pp, mb))
        if pp >= 2:
            wanted.append((dp * 2, tp, pp // 2, mb))
    if MEMORY_HEADROOM in report.flags:
        wanted.append((dp, tp, pp, mb * 2))
    if UNDERUTILIZED in report.flags and mb >= 2:
        wanted.append((dp, tp, pp, mb // 2))
    out, seen = [], {current.config_id}
    for triple in wanted:
        config = reconfigure(*triple, profiles, device_slowdown, link_scale)
        if config is not None and config.config_id not in seen:
            seen.add(config.config_id)
            out.append(config)
    if full_search and report.flags:
        try:
            best = discover(profiles.hw.scaled(*link_scale), profiles.model, profiles.dataset,
                            profiles.job, profiles.comm_plan).best
        except NoFeasibleStrategy:
            best = None
        if best is not None and best.config_id not in seen:
            out.append(best)
    return out


def evaluate(config: ParallelismConfig, profiles: Profiles, device_slowdown: Sequence[float] = (),
             link_scale=(1.0, 1.0)) -> CostBreakdown:
    return estimate_iteration(config, profiles.hw.scaled(*link_scale), profiles.model,
                              profiles.dataset, profiles.comm_plan,
                              stage_scale_for(device_slowdown, config))


# ---------------------------------------------------------------------------
# decisions
# ---------------------------------------------------------------------------

def decide(report: BottleneckReport, current: ParallelismConfig, state: SelectorState,
           profiles: Profiles, step: int, device_slowdown: Sequence[float] = (),
           link_scale=(1.0, 1.0)) -> Decision:
    """Keep, or move to the cheapest candidate when it clears both gain gates.

    ``step`` counts completed steps.  Candidates are rejected if they return to
    a configuration left within two hysteresis periods.
    """
    cfg = state.config
    flags = report.ordered_flags
    if step - state.last_transition_step < cfg.hysteresis or not report.flags:
        return Decision("keep", flags=flags, evaluated=True)
    recent = {f for s, f, _ in state.history if step - s < 2 * cfg.hysteresis}
    now = evaluate(current, profiles, device_slowdown, link_scale)
    best, best_cost = None, None
    for config in candidates(report, current, profiles, device_slowdown, link_scale, cfg.full_search):
        if config.config_id in recent:
            continue
        cost = evaluate(config, profiles, device_slowdown, link_scale)
        if best_cost is None or cost.total_s < best_cost.total_s:
            best, best_cost = config, cost
    if best is None:
        return Decision("keep", flags=flags, evaluated=True)
    gain = now.total_s - best_cost.total_s
    if gain <= 0 or gain < cfg.min_relative_gain * now.total_s:
        return Decision("keep", flags=flags, evaluated=True)
    plan = plan_transition(current, best, profiles.hw.scaled(*link_scale), profiles.model,
                           iteration_time_s=now.total_s, safe_point_step=step,
                           surcharge_iterations=profiles.surcharge_iterations)
    if not gain * state.remaining_steps > plan.pause_s * (1.0 + cfg.gain_margin):
        return Decision("keep", expected_gain_s_per_step=gain, flags=flags, evaluated=True)
    return Decision("transition", best, gain, flags, plan, evaluated=True)


def selector_step(state: SelectorState, snapshot: MetricsSnapshot, current: ParallelismConfig,
                  profiles: Profiles, remaining_steps: int | None = None) -> Decision:
    """Feed one snapshot; every ``monitor_interval`` completed steps, observe and decide."""
    state.window.append(snapshot)
    if remaining_steps is not None:
        state.remaining_steps = remaining_steps
    completed = snapshot.step + 1
    if completed % state.config.monitor_interval:
        return KEEP
    report = observe(list(state.window), state.config)
    return decide(report, current, state, profiles, completed,
                  snapshot.device_slowdown, snapshot.link_scale)
