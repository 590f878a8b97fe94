"""Step-level training simulator driven by the analytic cost model."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from typing import Any, Mapping

from .comm import CommPlan, comm_optimize
from .cost_model import ParallelismConfig, check_config, estimate_iteration, memory_footprint
from .layout import ShardLayout, TransitionPlan, build_layout, execute_layout, plan_transition
from .profilers import DatasetProfile, HardwareProfile, ModelProfile
from .selector import Profiles, SelectorConfig, SelectorState, selector_step, stage_scale_for
from .specs import JobSpec, ScenarioEvent
from .trace import DecisionRecord, MetricsSnapshot, Trace, TraceSummary, TransitionRecord

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimulationParams:
    noise: float = 0.02
    initial_loss: float = 10.0
    loss_tau: float = 1000.0
    loss_gamma: float = 0.5
    convergence_window: int = 50
    surcharge_iterations: float = 2.0

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any] | None) -> "SimulationParams":
        doc = dict(doc or {})
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown simulation keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class SimState:
    step: int
    config: ParallelismConfig
    layout: ShardLayout | None
    device_slowdown: list[float]
    link_scale: dict[str, float]
    loss: float
    pending_events: list[ScenarioEvent]
    rng: random.Random
    trace: Trace
    hw: HardwareProfile
    model: ModelProfile
    dataset: DatasetProfile
    job: JobSpec
    params: SimulationParams = field(default_factory=SimulationParams)
    comm_plan: CommPlan | None = None
    pending_transition_s: float = 0.0
    losses: list[float] = field(default_factory=list)
    last_total_s: float = 0.0

    @property
    def drifted_hw(self) -> HardwareProfile:
        return self.hw.scaled(self.link_scale["intra"], self.link_scale["inter"])

    @property
    def stage_scale(self) -> tuple[float, ...]:
        return stage_scale_for(self.device_slowdown, self.config)


def init_run(config: ParallelismConfig, hw: HardwareProfile, model: ModelProfile,
             dataset: DatasetProfile, job: JobSpec, comm_plan: CommPlan | None = None,
             params: SimulationParams | None = None) -> SimState:
    check_config(config, hw.total_gpus, len(model), dataset.global_batch_size, model)
    mem = memory_footprint(config, model, hw)
    if mem.headroom_fraction < 0:
        raise SimulationError(f"config {config.config_id} needs {mem.total_bytes:.4g} B per device, "
                              f"only {hw.device_memory:.4g} B available")
    params = params or SimulationParams.from_mapping(job.block("simulation"))
    if comm_plan is None:
        comm_plan = comm_optimize(config, hw, job.block("comm"))
    return SimState(
        step=0,
        config=config,
        layout=build_layout(config, model),
        device_slowdown=[1.0] * hw.total_gpus,
        link_scale={"intra": 1.0, "inter": 1.0},
        loss=params.initial_loss,
        pending_events=sorted(job.scenario_events, key=lambda e: e.at_step),
        rng=random.Random(job.seed),
        trace=Trace(),
        hw=hw, model=model, dataset=dataset, job=job,
        params=params,
        comm_plan=comm_plan,
        losses=[],
    )


def _stage_devices(config: ParallelismConfig, stage: int) -> range:
    block = config.dp * config.tp
    return range(stage * block, (stage + 1) * block)


def apply_event(state: SimState, event: ScenarioEvent) -> None:
    """Fold one scenario event into the drift multipliers.

    Stage targets name a stage of the config running when the event fires;
    slowdowns compound, ``restore`` resets the target to nominal speed.
    """
    if event.kind == "bandwidth_drop":
        state.link_scale[event.target] *= event.multiplier
    elif event.kind == "stage_slowdown" or (event.kind == "restore" and isinstance(event.target, int)):
        if not 0 <= event.target < state.config.pp:
            log.warning("event at step %d targets stage %s of a %d-stage config; ignored",
                        event.at_step, event.target, state.config.pp)
            return
        for d in _stage_devices(state.config, event.target):
            state.device_slowdown[d] = (state.device_slowdown[d] * event.multiplier
                                        if event.kind == "stage_slowdown" else 1.0)
    elif event.kind == "restore":
        state.link_scale[event.target] = 1.0
    else:
        raise SimulationError(f"unknown event kind {event.kind!r}")


def step(state: SimState) -> MetricsSnapshot:
    if state.step >= state.job.target_steps:
        raise SimulationError(f"run already reached target_steps={state.job.target_steps}")
    while state.pending_events and state.pending_events[0].at_step <= state.step:
        apply_event(state, state.pending_events.pop(0))

    p = state.params
    cost = estimate_iteration(state.config, state.drifted_hw, state.model, state.dataset,
                              state.comm_plan, state.stage_scale, check=False)
    state.last_total_s = cost.total_s
    noise = 1.0 + state.rng.uniform(-p.noise, p.noise)
    transition_s, state.pending_transition_s = state.pending_transition_s, 0.0
    busy = cost.total_s * noise
    iteration = busy + transition_s

    t = state.step
    state.loss = p.initial_loss * (1.0 + t / p.loss_tau) ** (-p.loss_gamma)
    state.losses.append(state.loss)
    w = min(p.convergence_window, t)
    rate = (state.losses[t - w] - state.loss) / w if w > 0 else 0.0

    mem = memory_footprint(state.config, state.model, state.hw)
    gb = state.dataset.global_batch_size
    raw_throughput = gb / iteration if iteration > 0 else math.inf
    throughput = min(raw_throughput, state.dataset.max_input_throughput)
    scale = 1.0 / iteration if iteration > 0 else 0.0
    snap = MetricsSnapshot(
        step=t,
        iteration_time_s=iteration,
        throughput_samples_s=throughput,
        gpu_utilization=min(1.0, cost.compute_s * noise * scale),
        memory_used_bytes=mem.total_bytes,
        comm_fraction=(cost.tp_comm_s + cost.dp_sync_s + cost.p2p_s) * noise * scale,
        stage_imbalance=cost.stage_imbalance,
        convergence_rate=rate,
        config_id=state.config.config_id,
        headroom_fraction=mem.headroom_fraction,
        input_bound=raw_throughput >= state.dataset.max_input_throughput,
        transition_s=transition_s,
        model_total_s=cost.total_s,
        device_slowdown=tuple(state.device_slowdown),
        link_scale=(state.link_scale["intra"], state.link_scale["inter"]),
    )
    state.trace.append(snap)
    state.step += 1
    return snap


def execute_transition(state: SimState, plan: TransitionPlan, flags: tuple[str, ...] = ()) -> SimState:
    if state.step != plan.safe_point_step:
        raise SimulationError(f"plan targets step {plan.safe_point_step}, state is at {state.step}")
    if plan.from_config != state.config:
        raise SimulationError("plan does not start from the running config")
    if plan.is_noop:
        return state
    state.layout = execute_layout(plan, state.model, state.layout)
    state.config = plan.to_config
    state.pending_transition_s += plan.pause_s
    state.trace.append(TransitionRecord(state.step, plan.from_config.config_id,
                                        plan.to_config.config_id, plan.bytes_moved,
                                        plan.pause_s, flags))
    return state


@dataclass
class RunResult:
    trace: Trace
    summary: TraceSummary
    final_config: ParallelismConfig


def run(job: JobSpec, hw: HardwareProfile, model: ModelProfile, dataset: DatasetProfile,
        config: ParallelismConfig, policy: str = "static",
        selector_config: SelectorConfig | None = None,
        comm_plan: CommPlan | None = None) -> RunResult:
    """Simulate ``job.target_steps`` steps starting from ``config``.

    ``policy="adaptive"`` consults the selector after every step unless the job
    disables adaptation, which always wins.
    """
    if policy not in ("static", "adaptive"):
        raise ValueError(f"policy must be 'static' or 'adaptive', got {policy!r}")
    state = init_run(config, hw, model, dataset, job, comm_plan)
    selector = None
    if policy == "adaptive" and job.adaptation_enabled:
        sel_cfg = selector_config or SelectorConfig.from_mapping(job.block("selector"))
        selector = SelectorState(sel_cfg, remaining_steps=job.target_steps)
        profiles = Profiles(hw, model, dataset, job, state.comm_plan, state.params.surcharge_iterations)
    while state.step < job.target_steps:
        snap = step(state)
        if selector is None:
            continue
        remaining = job.target_steps - state.step
        decision = selector_step(selector, snap, state.config, profiles, remaining)
        if not decision.evaluated:
            continue
        state.trace.append(DecisionRecord(state.step, decision.action, decision.flags,
                                          decision.expected_gain_s_per_step))
        if decision.is_transition and remaining > 0:
            plan = plan_transition(state.config, decision.to_config, state.drifted_hw, model,
                                   iteration_time_s=state.last_total_s, safe_point_step=state.step,
                                   surcharge_iterations=state.params.surcharge_iterations,
                                   src=state.layout)
            from_id = state.config.config_id
            execute_transition(state, plan, decision.flags)
            selector.record_transition(state.step, from_id, plan.to_config.config_id)
    summary = state.trace.close()
    final = state.config
    state.layout = None  # release the shard map with the run
    return RunResult(state.trace, summary, final)
