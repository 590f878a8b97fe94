"""Discovery-phase search over (dp, tp, pp, micro-batch) layouts.

``discover`` prunes the degree space with a few rules, then for every surviving
candidate solves stage cuts and per-layer strategies jointly with dynamic
programming.  ``exhaustive_plan`` enumerates the same space by brute force and
is kept as the reference the DP is checked against.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .comm import CommPlan, comm_optimize
from .cost_model import (
    DR,
    TP,
    CostBreakdown,
    LayerStrategy,
    MemoryFootprint,
    ParallelismConfig,
    bytes_per_param,
    conversion_time,
    dp_gradient_sync_time,
    estimate_iteration,
    group_links,
    is_pow2,
    layer_compute_time,
    memory_footprint,
    tp_activation_comm_time,
)
from .profilers import DatasetProfile, HardwareProfile, ModelProfile
from .specs import JobSpec

PIPELINE_PARAM_THRESHOLD = 1e9
DEFAULT_MAX_MICRO_BATCH = 64
ORACLE_MAX_GPUS = 16
ORACLE_MAX_LAYERS = 10

R1 = "R1_tp_exceeds_node"
R2 = "R2_replicated_states_exceed_memory"
R3 = "R3_large_model_needs_pipeline"
R4 = "R4_more_stages_than_layers"
NO_BATCH = "no_micro_batch_split"


class NoFeasibleStrategy(Exception):
    pass


class OracleGuardError(ValueError):
    pass


@dataclass
class CandidateSet:
    degree_triples: list[tuple[int, int, int]]
    micro_batch_options: dict[tuple[int, int, int], list[int]]
    pruning_log: list[tuple[tuple[int, int, int], str]] = field(default_factory=list)


@dataclass
class SearchResult:
    best: ParallelismConfig
    best_cost: CostBreakdown
    evaluated_count: int
    memory: MemoryFootprint | None = None
    candidates: CandidateSet | None = None


def degree_triples(total_gpus: int) -> list[tuple[int, int, int]]:
    """All power-of-two (dp, tp, pp) with dp*tp*pp == total_gpus, ordered by (pp, tp, dp)."""
    if not is_pow2(total_gpus):
        return []
    e = total_gpus.bit_length() - 1
    out = [(2 ** (e - a - b), 2 ** a, 2 ** b)
           for b in range(e + 1) for a in range(e + 1 - b)]
    return sorted(out, key=lambda t: (t[2], t[1], t[0]))


def micro_batch_options(global_batch: int, dp: int,
                        max_micro_batch: int = DEFAULT_MAX_MICRO_BATCH) -> list[int]:
    if global_batch % dp:
        return []
    per_replica = global_batch // dp
    out, mb = [], 1
    while mb <= min(max_micro_batch, per_replica):
        if per_replica % mb == 0:
            out.append(mb)
        mb *= 2
    return out


def _max_micro_batch(job: JobSpec) -> int:
    return int(job.block("search").get("max_micro_batch", DEFAULT_MAX_MICRO_BATCH))


def _rule_reasons(triple: tuple[int, int, int], hw: HardwareProfile, model: ModelProfile,
                  job: JobSpec, heuristics: bool = True) -> list[str]:
    dp, tp, pp = triple
    total = hw.total_gpus
    reasons = []
    if tp > hw.gpus_per_node:
        reasons.append(R1)
    if heuristics and pp == 1 and total > 1 and model.total_params > PIPELINE_PARAM_THRESHOLD:
        reasons.append(R3)
    if tp == 1 and pp == 1:
        states = bytes_per_param(job.zero_stage_allowed, dp, model.precision_bytes) * model.total_params
        if states > hw.device_memory:
            reasons.append(R2)
    if pp > len(model):
        reasons.append(R4)
    return reasons


def enumerate_degree_candidates(hw: HardwareProfile, model: ModelProfile, job: JobSpec,
                                heuristics: bool = True) -> CandidateSet:
    """Power-of-two triples minus the pruning rules; every matching rule is logged.

    ``heuristics=False`` drops R3, the only rule that is a policy rather than a
    feasibility argument.
    """
    max_mb = _max_micro_batch(job)
    kept, options, log = [], {}, []
    for triple in degree_triples(hw.total_gpus):
        reasons = _rule_reasons(triple, hw, model, job, heuristics)
        mbs = micro_batch_options(job.global_batch_size, triple[0], max_mb)
        if not mbs:
            reasons.append(NO_BATCH)
        if reasons:
            log.extend((triple, r) for r in reasons)
            continue
        kept.append(triple)
        options[triple] = mbs
    if not kept:
        raise NoFeasibleStrategy("no feasible strategy: every degree triple was pruned "
                                 f"({sorted({r for _, r in log})})")
    return CandidateSet(kept, options, log)


# ---------------------------------------------------------------------------
# stage partitioning
# ---------------------------------------------------------------------------

def _minmax_partition(n: int, pp: int, seg_cost: Callable[[int, int, int], float]) -> tuple[list[int], float]:
    """Contiguous cut of ``n`` items into ``pp`` stages minimising the max stage cost.

    ``seg_cost(k, a, b)`` is the cost of items ``[a, b)`` placed on stage ``k``.
    Among optimal cuts the one with the earliest boundaries is returned.
    """
    if pp < 1 or pp > n:
        raise ValueError(f"cannot cut {n} layers into {pp} stages")
    inf = math.inf
    # suffix[k][i]: best max cost of items [i, n) on stages k..pp-1
    suffix = [[inf] * (n + 1) for _ in range(pp + 1)]
    suffix[pp][n] = -inf
    for k in range(pp - 1, -1, -1):
        for i in range(k, n - (pp - k) + 1):
            best = inf
            for j in range(i + 1, n - (pp - k - 1) + 1):
                v = max(seg_cost(k, i, j), suffix[k + 1][j])
                if v < best:
                    best = v
            suffix[k][i] = best
    opt = suffix[0][0]
    cuts, i = [0], 0
    for k in range(pp):
        for j in range(i + 1, n - (pp - k - 1) + 1):
            if max(seg_cost(k, i, j), suffix[k + 1][j]) == suffix[k][i]:
                cuts.append(j)
                i = j
                break
    return cuts, opt


def partition_stages(layer_costs: Sequence[float], pp: int,
                     stage_scale: Sequence[float] | None = None) -> list[int]:
    """Boundaries minimising the slowest stage; ``stage_scale`` models slower stages."""
    n = len(layer_costs)
    if pp > n:
        raise ValueError(f"pp={pp} exceeds the {n} layers available")
    scale = stage_scale or [1.0] * pp
    costs = list(layer_costs)
    cache: dict[tuple[int, int], float] = {}

    def seg(k: int, a: int, b: int) -> float:
        if (a, b) not in cache:
            cache[a, b] = math.fsum(costs[a:b])
        return scale[k] * cache[a, b]

    return _minmax_partition(n, pp, seg)[0]


# ---------------------------------------------------------------------------
# per-layer strategies
# ---------------------------------------------------------------------------

def two_mode_dp(tp_costs: Sequence[float | None], dr_costs: Sequence[float],
                conv_costs: Sequence[float]) -> tuple[list[LayerStrategy], float]:
    """Cheapest chain of layer modes; ``conv_costs[i]`` is paid when layers i-1 and i differ.

    ``tp_costs[i] = None`` forbids tensor parallelism on layer ``i``.  Ties go
    to data_replicated.
    """
    n = len(dr_costs)
    if n == 0:
        return [], 0.0
    inf = math.inf
    modes = (DR, TP)  # DR first so that strict comparisons keep it on ties
    cost = [[inf, inf] for _ in range(n)]
    back = [[0, 0] for _ in range(n)]
    own = [(dr_costs[i], inf if tp_costs[i] is None else tp_costs[i]) for i in range(n)]
    cost[0] = list(own[0])
    for i in range(1, n):
        for s in (0, 1):
            best, arg = inf, 0
            for prev in (0, 1):
                v = cost[i - 1][prev] + (conv_costs[i] if prev != s else 0.0)
                if v < best:
                    best, arg = v, prev
            cost[i][s] = best + own[i][s]
            back[i][s] = arg
    s = 0 if cost[-1][0] <= cost[-1][1] else 1
    total = cost[-1][s]
    out = [s]
    for i in range(n - 1, 0, -1):
        s = back[i][s]
        out.append(s)
    return [modes[s] for s in reversed(out)], total


def _layer_costs(model: ModelProfile, hw: HardwareProfile, tp: int, mb: int, link):
    """Per-layer (dr seconds, tp seconds or None, conversion seconds before the layer)."""
    dr, tpc, conv = [], [], []
    for i, layer in enumerate(model.layers):
        dr.append(layer_compute_time(layer, DR, tp, mb, hw))
        if tp > 1 and layer.tp_shardable:
            tpc.append(layer_compute_time(layer, TP, tp, mb, hw)
                       + tp_activation_comm_time(layer, TP, tp, mb, link))
        else:
            tpc.append(None)
        conv.append(conversion_time(model.layers[i - 1].activation_bytes, mb, tp, link) if i else 0.0)
    return dr, tpc, conv


def assign_layer_strategies(triple: tuple[int, int, int], stage_boundaries: Sequence[int],
                            micro_batch: int, hw: HardwareProfile,
                            model: ModelProfile) -> tuple[LayerStrategy, ...]:
    """Per-stage two-mode DP; mode switches are only charged inside a stage."""
    dp, tp, pp = triple
    if tp == 1:
        return (DR,) * len(model)
    tp_links = group_links(hw, dp, tp, pp)[0]
    out: list[LayerStrategy] = []
    for k in range(pp):
        a, b = stage_boundaries[k], stage_boundaries[k + 1]
        dr, tpc, conv = _layer_costs(model, hw, tp, micro_batch, tp_links[k])
        modes, _ = two_mode_dp(tpc[a:b], dr[a:b], [0.0] + conv[a + 1:b])
        out.extend(modes)
    return tuple(out)


# ---------------------------------------------------------------------------
# discovery
# ---------------------------------------------------------------------------

def _pareto(points: list[tuple]) -> list[tuple]:
    """Points not dominated in their first two coordinates; first occurrence wins."""
    points = sorted(points, key=lambda p: (p[0], p[1]))
    out, best = [], math.inf
    for p in points:
        if p[1] < best:
            out.append(p)
            best = p[1]
    return out


def _segment_frontiers(model: ModelProfile, hw: HardwareProfile, tp: int, mb: int, link):
    """frontier[a][b]: Pareto set of (seconds, device params, modes) for layers [a, b) on one stage."""
    n = len(model)
    dr, tpc, conv = _layer_costs(model, hw, tp, mb, link)
    params = [l.param_count for l in model.layers]
    frontier: list[list[list[tuple]]] = [[[] for _ in range(n + 1)] for _ in range(n)]
    for a in range(n):
        # states[s]: Pareto list ending in mode s (0 = DR, 1 = TP)
        states: list[list[tuple]] = [[], []]
        for i in range(a, n):
            own = [(dr[i], params[i])]
            own.append(None if tpc[i] is None else (tpc[i], params[i] / tp))
            new: list[list[tuple]] = [[], []]
            for s in (0, 1):
                if own[s] is None:
                    continue
                t_own, p_own = own[s]
                if i == a:
                    new[s].append((t_own, p_own, (s,)))
                    continue
                for prev in (0, 1):
                    extra = conv[i] if prev != s else 0.0
                    for t, p, modes in states[prev]:
                        new[s].append((t + extra + t_own, p + p_own, modes + (s,)))
                new[s] = _pareto(new[s])
            states = new
            frontier[a][i + 1] = _pareto(states[0] + states[1])
    return frontier


def _plan_candidate(triple, mb, hw, model, dataset, job, plan, seg_cache):
    """Exact best layout for one (dp, tp, pp, micro-batch); None when nothing fits in memory."""
    dp, tp, pp = triple
    n = len(model)
    m = dataset.global_batch_size // (dp * mb)
    tp_links, dp_links, _ = group_links(hw, dp, tp, pp)
    frontiers = {}
    for link in set(tp_links):
        key = (tp, mb, link)
        if key not in seg_cache:
            seg_cache[key] = _segment_frontiers(model, hw, tp, mb, link)
        frontiers[link] = seg_cache[key]

    bpp = bytes_per_param(job.zero_stage_allowed, dp, model.precision_bytes)
    nonzero = [0]
    for l in model.layers:
        nonzero.append(nonzero[-1] + (l.param_count > 0))
    no_overlap = CommPlan(plan.fusion_enabled, plan.bucket_bytes) if plan else None

    act_sums = seg_cache.setdefault("activation", {})

    def stage_points(k, a, b):
        if (a, b) not in act_sums:
            act_sums[a, b] = math.fsum(l.activation_bytes for l in model.layers[a:b])
        act = act_sums[a, b] * mb * pp
        out = []
        for t, p, modes in frontiers[tp_links[k]][a][b]:
            if bpp * p + act > hw.device_memory:
                continue
            r = dp_gradient_sync_time(p * model.precision_bytes, dp, dp_links[k], no_overlap,
                                      0.0, nonzero[b] - nonzero[a]) if dp > 1 else 0.0
            out.append((t, r, modes))
        return out

    # layer[k][j]: Pareto set of (max stage seconds, max raw sync seconds, back-pointer)
    layer: list[dict[int, list[tuple]]] = [{0: [(0.0, 0.0, None)]}]
    for k in range(pp):
        cur: dict[int, list[tuple]] = {}
        for j in range(k + 1, n - (pp - k - 1) + 1):
            cands = []
            for i, prev in layer[k].items():
                if i >= j or not prev:
                    continue
                for t, r, modes in stage_points(k, i, j):
                    for idx, (T, R, _) in enumerate(prev):
                        cands.append((max(T, t), max(R, r), (i, idx, modes)))
            if cands:
                cur[j] = _pareto(cands)
        layer.append(cur)
    finals = layer[pp].get(n, [])
    if not finals:
        return None, 0

    best = None
    for idx in range(len(finals)):
        cuts, modes = [n], []
        k, j, at = pp, n, idx
        while k > 0:
            i, prev_idx, seg_modes = layer[k][j][at][2]
            modes[:0] = [TP if s else DR for s in seg_modes]
            cuts.insert(0, i)
            k, j, at = k - 1, i, prev_idx
        config = ParallelismConfig(dp, tp, pp, mb, m, tuple(cuts), tuple(modes), job.zero_stage_allowed)
        cost = estimate_iteration(config, hw, model, dataset, plan, check=False)
        if best is None or cost.total_s < best[1].total_s:
            best = (config, cost)
    return best, len(finals)


def _lowest_zero(config: ParallelismConfig, model: ModelProfile, hw: HardwareProfile,
                 allowed: int) -> tuple[ParallelismConfig, MemoryFootprint] | None:
    # ZeRO only changes memory, so the lowest stage that fits is preferred
    for z in range(allowed + 1):
        candidate = _with_zero(config, z)
        mem = memory_footprint(candidate, model, hw)
        if mem.headroom_fraction >= 0:
            return candidate, mem
    return None


def _with_zero(config: ParallelismConfig, z: int) -> ParallelismConfig:
    return ParallelismConfig(config.dp, config.tp, config.pp, config.micro_batch_size,
                             config.num_micro_batches, config.stage_boundaries,
                             config.layer_strategies, z)


def _better(cost: CostBreakdown, key: tuple, best) -> bool:
    return best is None or (cost.total_s, key) < (best[1].total_s, best[2])


def discover(hw: HardwareProfile, model: ModelProfile, dataset: DatasetProfile, job: JobSpec,
             comm_plan: CommPlan | None = None) -> SearchResult:
    plan = comm_plan if comm_plan is not None else comm_optimize(flags=job.block("comm"))
    candidates = enumerate_degree_candidates(hw, model, job)
    best, evaluated, seg_cache = None, 0, {}
    for triple in candidates.degree_triples:
        for mb in candidates.micro_batch_options[triple]:
            found, count = _plan_candidate(triple, mb, hw, model, dataset, job, plan, seg_cache)
            evaluated += count
            if found is None:
                continue
            fitted = _lowest_zero(found[0], model, hw, job.zero_stage_allowed)
            if fitted is None:
                continue
            dp, tp, pp = triple
            if _better(found[1], (pp, tp, dp, mb), best):
                best = (fitted, found[1], (pp, tp, dp, mb))
    if best is None:
        raise NoFeasibleStrategy("no feasible strategy: no candidate fits in device memory")
    (config, mem), cost, _ = best
    return SearchResult(config, cost, evaluated, mem, candidates)


def exhaustive_plan(hw: HardwareProfile, model: ModelProfile, dataset: DatasetProfile,
                    job: JobSpec, comm_plan: CommPlan | None = None,
                    heuristics: bool = False) -> SearchResult:
    """Brute force over triples, micro-batches, stage cuts and 2^layers strategy choices.

    Only the hard rules R1/R4 (and the batch split) prune, unless
    ``heuristics`` is set, in which case the policy rule R3 applies too.
    """
    n = len(model)
    if hw.total_gpus > ORACLE_MAX_GPUS or n > ORACLE_MAX_LAYERS:
        raise OracleGuardError(f"instance too large for oracle ({hw.total_gpus} GPUs, {n} layers; "
                               f"limits {ORACLE_MAX_GPUS} / {ORACLE_MAX_LAYERS})")
    plan = comm_plan if comm_plan is not None else comm_optimize(flags=job.block("comm"))
    max_mb = _max_micro_batch(job)
    best, evaluated = None, 0
    for dp, tp, pp in degree_triples(hw.total_gpus):
        if tp > hw.gpus_per_node or pp > n:
            continue
        if heuristics and pp == 1 and hw.total_gpus > 1 and model.total_params > PIPELINE_PARAM_THRESHOLD:
            continue
        mode_choices = [(DR, TP) if tp > 1 and l.tp_shardable else (DR,) for l in model.layers]
        for mb in micro_batch_options(dataset.global_batch_size, dp, max_mb):
            m = dataset.global_batch_size // (dp * mb)
            for inner in itertools.combinations(range(1, n), pp - 1):
                cuts = (0,) + inner + (n,)
                for modes in itertools.product(*mode_choices):
                    config = ParallelismConfig(dp, tp, pp, mb, m, cuts, modes, job.zero_stage_allowed)
                    evaluated += 1
                    if memory_footprint(config, model, hw).headroom_fraction < 0:
                        continue
                    cost = estimate_iteration(config, hw, model, dataset, plan, check=False)
                    if _better(cost, (pp, tp, dp, mb), best):
                        best = (config, cost, (pp, tp, dp, mb))
    if best is None:
        raise NoFeasibleStrategy("no feasible strategy: no layout fits in device memory")
    config, mem = _lowest_zero(best[0], model, hw, job.zero_stage_allowed)
    return SearchResult(config, best[1], evaluated, mem)


def feasibility_scan(hw: HardwareProfile, model: ModelProfile, dataset: DatasetProfile,
                     job: JobSpec) -> str | None:
    """Why no layout can be planned, or None when at least one fits."""
    max_mb = _max_micro_batch(job)

    def fits(triple, mb) -> bool:
        dp, tp, pp = triple
        bpp = bytes_per_param(job.zero_stage_allowed, dp, model.precision_bytes)
        # splitting every shardable layer is the memory-minimal assignment
        per_layer = [bpp * (l.param_count / tp if tp > 1 and l.tp_shardable else l.param_count)
                     + mb * pp * l.activation_bytes for l in model.layers]
        cuts = partition_stages(per_layer, pp)
        return max(math.fsum(per_layer[a:b]) for a, b in zip(cuts, cuts[1:])) <= hw.device_memory

    allowed = [t for t in degree_triples(hw.total_gpus) if not _rule_reasons(t, hw, model, job)]
    if not allowed:
        return "no feasible strategy: every degree triple is pruned by the planning rules"
    memory_ok = [t for t in allowed if fits(t, 1)]
    if not memory_ok:
        return "no memory-feasible strategy"
    for t in memory_ok:
        if any(fits(t, mb) for mb in micro_batch_options(dataset.global_batch_size, t[0], max_mb)):
            return None
    return (f"no feasible micro-batching: global batch {dataset.global_batch_size} admits no "
            f"micro-batch split for the memory-feasible degrees {memory_ok}")
