"""Parameter shard layouts and the resharding needed to move between them.

A shard is a half-open element range ``(start, end)`` of one layer's flat
parameter vector.  Every device holds the shards it computes with; within a
replica group (the devices sharing a data-parallel rank) each element is
*owned* by exactly one device, which is what the conservation audit checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cost_model import TP, ParallelismConfig
from .profilers import HardwareProfile, ModelProfile

Range = tuple[int, int]


class ConservationError(RuntimeError):
    """A layout lost, duplicated or invented parameter elements."""


@dataclass(frozen=True)
class ShardLayout:
    config: ParallelismConfig
    layer_sizes: tuple[int, ...]
    held: tuple[dict[int, Range], ...]  # per device: layer -> range it keeps in memory
    owned: tuple[dict[int, Range], ...]  # per device: layer -> range it is accountable for
    replica_groups: tuple[tuple[int, ...], ...]
    # zero_stage >= 1: the slice of each held range whose optimizer state this device keeps
    optimizer_shards: tuple[dict[int, Range], ...] = field(default=(), compare=False)

    @property
    def num_devices(self) -> int:
        return len(self.held)

    @property
    def total_elements(self) -> int:
        return sum(self.layer_sizes)

    def owned_elements(self, group: int) -> int:
        return sum(e - s for d in self.replica_groups[group] for s, e in self.owned[d].values())


def device_rank(config: ParallelismConfig, stage: int, dp_rank: int, tp_rank: int) -> int:
    return stage * config.dp * config.tp + dp_rank * config.tp + tp_rank


def _split(n: int, parts: int, i: int) -> Range:
    return (i * n // parts, (i + 1) * n // parts)


def build_layout(config: ParallelismConfig, model: ModelProfile) -> ShardLayout:
    dp, tp, pp = config.triple
    devices = dp * tp * pp
    held: list[dict[int, Range]] = [{} for _ in range(devices)]
    owned: list[dict[int, Range]] = [{} for _ in range(devices)]
    opt: list[dict[int, Range]] = [{} for _ in range(devices)]
    sizes = tuple(l.param_count for l in model.layers)
    for k in range(pp):
        for i in config.stage_layers(k):
            n = sizes[i]
            if n == 0:
                continue
            sharded = config.layer_strategies[i] is TP and tp > 1
            for r in range(dp):
                for t in range(tp):
                    d = device_rank(config, k, r, t)
                    if sharded:
                        held[d][i] = owned[d][i] = _split(n, tp, t)
                    else:
                        held[d][i] = (0, n)
                        if t == 0:
                            owned[d][i] = (0, n)
                    if config.zero_stage >= 1:
                        s, e = held[d][i]
                        a, b = _split(e - s, dp, r)
                        opt[d][i] = (s + a, s + b)
    groups = tuple(
        tuple(device_rank(config, k, r, t) for k in range(pp) for t in range(tp))
        for r in range(dp)
    )
    return ShardLayout(config, sizes, tuple(held), tuple(owned), groups, tuple(opt))


def audit_layout(layout: ShardLayout) -> list[str]:
    """Coverage and disjointness violations of ``layout`` (empty when sound)."""
    problems = []
    for g, group in enumerate(layout.replica_groups):
        per_layer: dict[int, list[Range]] = {}
        for d in group:
            for i, (s, e) in layout.owned[d].items():
                held = layout.held[d].get(i)
                if held is None or not (held[0] <= s and e <= held[1]):
                    problems.append(f"group {g}: device {d} owns layer {i} {s}:{e} without holding it")
                per_layer.setdefault(i, []).append((s, e))
        for i, n in enumerate(layout.layer_sizes):
            pos = 0
            for s, e in sorted(per_layer.get(i, [])):
                if s < pos:
                    problems.append(f"group {g}: layer {i} elements {s}:{min(e, pos)} owned twice")
                elif s > pos:
                    problems.append(f"group {g}: layer {i} elements {pos}:{s} not owned")
                pos = max(pos, e)
            if pos < n:
                problems.append(f"group {g}: layer {i} elements {pos}:{n} not owned")
            if pos > n:
                problems.append(f"group {g}: layer {i} owns past its {n} elements")
        if layout.owned_elements(g) != layout.total_elements:
            problems.append(f"group {g}: owns {layout.owned_elements(g)} of "
                            f"{layout.total_elements} elements")
    return problems


def _minus(r: Range, s: Range | None) -> list[Range]:
    if s is None or s[1] <= r[0] or r[1] <= s[0]:
        return [r]
    out = []
    if r[0] < s[0]:
        out.append((r[0], s[0]))
    if s[1] < r[1]:
        out.append((s[1], r[1]))
    return out


def _covered(piece: Range, ranges: list[Range]) -> bool:
    pos = piece[0]
    for s, e in sorted(ranges):
        if s > pos:
            break
        pos = max(pos, e)
        if pos >= piece[1]:
            return True
    return pos >= piece[1]


@dataclass(frozen=True)
class TransitionPlan:
    from_config: ParallelismConfig
    to_config: ParallelismConfig
    bytes_moved: float
    pause_s: float
    safe_point_step: int
    transfer_s: float = 0.0
    moved_elements: int = 0
    links: tuple[str, ...] = ()

    @property
    def is_noop(self) -> bool:
        return self.from_config == self.to_config


def missing_pieces(src: ShardLayout, dst: ShardLayout) -> list[tuple[int, int, Range]]:
    """(device, layer, range) elements a device must hold after the move but does not now."""
    out = []
    for d in range(dst.num_devices):
        for i, r in dst.held[d].items():
            for piece in _minus(r, src.held[d].get(i)):
                out.append((d, i, piece))
    return out


def plan_transition(from_config: ParallelismConfig, to_config: ParallelismConfig,
                    hw: HardwareProfile, model: ModelProfile, iteration_time_s: float = 0.0,
                    safe_point_step: int = 0, surcharge_iterations: float = 2.0,
                    src: ShardLayout | None = None) -> TransitionPlan:
    """Cost of resharding from one config to another at ``safe_point_step``.

    The transfer runs at the slowest link any fetch has to use: a device whose
    missing elements all live somewhere on its own node uses the intra-node
    link, otherwise the inter-node one.  On top of the transfer a
    checkpoint save/restore costs ``surcharge_iterations`` iterations.
    """
    if from_config == to_config:
        return TransitionPlan(from_config, to_config, 0.0, 0.0, safe_point_step)
    src = src or build_layout(from_config, model)
    dst = build_layout(to_config, model)
    pieces = missing_pieces(src, dst)
    elements = sum(e - s for _, _, (s, e) in pieces)
    used = set()
    node_ranges: dict[tuple[int, int], list[Range]] = {}
    for d in range(src.num_devices):
        for i, r in src.held[d].items():
            node_ranges.setdefault((hw.node_of(d), i), []).append(r)
    for d, i, piece in pieces:
        local = node_ranges.get((hw.node_of(d), i), [])
        used.add("intra" if _covered(piece, local) else "inter")
    bytes_moved = float(model.precision_bytes * elements)
    links = tuple(sorted(used))
    bandwidth = min((getattr(hw, name).bandwidth for name in links), default=0.0)
    transfer = bytes_moved / bandwidth if bytes_moved > 0 else 0.0
    pause = transfer + surcharge_iterations * iteration_time_s
    return TransitionPlan(from_config, to_config, bytes_moved, pause, safe_point_step,
                          transfer, elements, links)


def execute_layout(plan: TransitionPlan, model: ModelProfile,
                   src: ShardLayout | None = None) -> ShardLayout:
    """Destination layout of ``plan`` after a conservation audit; panics on violation."""
    if plan.is_noop and src is not None:
        return src
    dst = build_layout(plan.to_config, model)
    problems = audit_layout(dst)
    if src is not None and src.total_elements != dst.total_elements:
        problems.append(f"element count changed {src.total_elements} -> {dst.total_elements}")
    if problems:
        raise ConservationError("; ".join(problems[:5]))
    return dst
