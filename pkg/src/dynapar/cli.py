"""Command-line entry point: plan, simulate, compare and oracle."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import random
import sys

from .comm import comm_optimize
from .cost_model import ParallelismConfig, check_config, memory_footprint
from .oracle import compare as oracle_compare
from .oracle import dump_instance, random_instance
from .profilers import profile_dataset, profile_hardware, profile_model
from .search import NoFeasibleStrategy, OracleGuardError, discover
from .selector import SelectorConfig
from .simulator import RunResult, SimulationError, run
from .specs import (
    SpecError,
    dumps,
    feasibility_problem,
    load_file,
    parse_cluster_spec,
    parse_job_spec,
    parse_model_spec,
    structural_violations,
)

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3

ORACLE_MAX_GPUS = 16


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_inputs(args):
    try:
        cluster = load_file(args.cluster, parse_cluster_spec)
        model = load_file(args.model, parse_model_spec)
        job = load_file(args.job, parse_job_spec)
    except SpecError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from None
    if getattr(args, "seed", None) is not None:
        job = dataclasses.replace(job, seed=args.seed)
    problems = structural_violations(cluster, model, job)
    if problems:
        raise CliError(EXIT_INVALID, "\n".join(problems))
    return cluster, model, job


class Context:
    def __init__(self, args):
        self.cluster, self.model_spec, self.job = _load_inputs(args)
        self.hw = profile_hardware(self.cluster)
        self.model = profile_model(self.model_spec, self.job.precision_bytes)
        self.dataset = profile_dataset(self.job)
        self.comm_plan = comm_optimize(None, self.hw, self.job.block("comm"))

    def initial_config(self, plan_path: str | None) -> ParallelismConfig:
        if plan_path is None:
            problem = feasibility_problem(self.cluster, self.model_spec, self.job)
            if problem:
                raise CliError(EXIT_INFEASIBLE, problem)
            try:
                return discover(self.hw, self.model, self.dataset, self.job, self.comm_plan).best
            except NoFeasibleStrategy as exc:
                raise CliError(EXIT_INFEASIBLE, str(exc)) from None
        try:
            with open(plan_path, encoding="utf-8") as fh:
                config = ParallelismConfig.from_dict(json.load(fh))
            check_config(config, self.hw.total_gpus, len(self.model),
                         self.dataset.global_batch_size, self.model)
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_INVALID, f"{plan_path}: {exc}") from None
        if memory_footprint(config, self.model, self.hw).headroom_fraction < 0:
            raise CliError(EXIT_INFEASIBLE, f"{plan_path}: plan does not fit in device memory")
        return config

    def selector_config(self, path: str | None) -> SelectorConfig:
        doc = self.job.block("selector")
        if path:
            try:
                with open(path, encoding="utf-8") as fh:
                    doc.update(json.load(fh))
            except (OSError, ValueError) as exc:
                raise CliError(EXIT_INVALID, f"{path}: {exc}") from None
        try:
            return SelectorConfig.from_mapping(doc)
        except (TypeError, ValueError) as exc:
            raise CliError(EXIT_INVALID, f"selector config: {exc}") from None

    def simulate(self, config, policy, selector_config) -> RunResult:
        try:
            return run(self.job, self.hw, self.model, self.dataset, config, policy,
                       selector_config, self.comm_plan)
        except SimulationError as exc:
            raise CliError(EXIT_INFEASIBLE, str(exc)) from None


def _fmt_bytes(n: float) -> str:
    return f"{n / 1e9:.3f} GB"


def cmd_plan(args) -> int:
    ctx = Context(args)
    problem = feasibility_problem(ctx.cluster, ctx.model_spec, ctx.job)
    if problem:
        raise CliError(EXIT_INFEASIBLE, problem)
    try:
        result = discover(ctx.hw, ctx.model, ctx.dataset, ctx.job, ctx.comm_plan)
    except NoFeasibleStrategy as exc:
        raise CliError(EXIT_INFEASIBLE, str(exc)) from None
    c, cost, mem = result.best, result.best_cost, result.memory
    print(f"config      {c.config_id}")
    print(f"  dp={c.dp} tp={c.tp} pp={c.pp} micro_batch={c.micro_batch_size} "
          f"micro_batches={c.num_micro_batches} zero_stage={c.zero_stage}")
    print(f"  stage_boundaries {list(c.stage_boundaries)}")
    n_tp = sum(1 for s in c.layer_strategies if s.value == "tensor_parallel")
    print(f"  layers: {n_tp} tensor_parallel, {len(c.layer_strategies) - n_tp} data_replicated")
    print("cost per iteration")
    for name in ("compute_s", "tp_comm_s", "dp_sync_s", "p2p_s", "bubble_s", "total_s"):
        print(f"  {name:<12}{getattr(cost, name):.6g}")
    print(f"  throughput  {cost.throughput:.6g} samples/s")
    print(f"  comm share  {cost.comm_fraction:.3f}")
    print("memory (most loaded device)")
    print(f"  model state {_fmt_bytes(mem.model_state_bytes)}")
    print(f"  activations {_fmt_bytes(mem.activation_bytes)}")
    print(f"  total       {_fmt_bytes(mem.total_bytes)}  headroom {mem.headroom_fraction:.3f}")
    print(f"evaluated {result.evaluated_count} candidates")
    print("pruning log")
    for triple, reason in result.candidates.pruning_log:
        print(f"  {triple}: {reason}")
    if args.emit:
        with open(args.emit, "w", encoding="utf-8") as fh:
            fh.write(dumps(c.to_dict()))
        print(f"plan written to {args.emit}")
    return EXIT_OK


def _print_summary(label: str, result: RunResult) -> None:
    s = result.summary
    print(f"{label}: steps={s.steps} wall_clock_s={s.total_wall_clock_s:.6f} "
          f"mean_throughput={s.mean_throughput:.4f} transitions={s.transitions} "
          f"final={result.final_config.config_id}")


def cmd_simulate(args) -> int:
    ctx = Context(args)
    config = ctx.initial_config(args.plan)
    result = ctx.simulate(config, args.policy, ctx.selector_config(args.selector_config))
    jsonl, csv_path = result.trace.write(args.trace)
    _print_summary(args.policy, result)
    for t in result.trace.transitions:
        print(f"  step {t.step}: {t.from_id} -> {t.to_id} moved {_fmt_bytes(t.bytes_moved)} "
              f"pause {t.pause_s:.4f}s [{', '.join(t.flags)}]")
    print(f"trace written to {jsonl} and {csv_path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    ctx = Context(args)
    config = ctx.initial_config(args.plan)
    sel = ctx.selector_config(args.selector_config)
    static = ctx.simulate(config, "static", sel)
    adaptive = ctx.simulate(config, "adaptive", sel)
    _print_summary("static  ", static)
    _print_summary("adaptive", adaptive)
    ws, wa = static.summary.total_wall_clock_s, adaptive.summary.total_wall_clock_s
    gain = (ws - wa) / ws if ws > 0 else 0.0
    print(f"relative wall-clock gain {gain:+.4%}")
    if args.trace:
        root = args.trace[:-6] if args.trace.endswith(".jsonl") else args.trace
        static.trace.write(root + ".static.jsonl")
        adaptive.trace.write(root + ".adaptive.jsonl")
    return EXIT_OK


def cmd_oracle(args) -> int:
    cluster = None
    if args.cluster:
        try:
            cluster = load_file(args.cluster, parse_cluster_spec)
        except SpecError as exc:
            raise CliError(EXIT_INVALID, str(exc)) from None
        if cluster.total_gpus > ORACLE_MAX_GPUS:
            raise CliError(EXIT_INVALID, f"oracle guard: {cluster.total_gpus} GPUs exceeds "
                                         f"{ORACLE_MAX_GPUS}")
    if args.max_gpus > ORACLE_MAX_GPUS or args.max_layers > 10:
        raise CliError(EXIT_INVALID, "oracle guard: at most 16 GPUs and 10 layers")
    rng = random.Random(args.seed)
    agreed = 0
    for trial in range(args.trials):
        instance = random_instance(rng, args.max_gpus, args.max_layers, cluster)
        try:
            result = oracle_compare(instance)
        except OracleGuardError as exc:
            raise CliError(EXIT_INVALID, f"oracle guard: {exc}") from None
        if not result.agrees:
            paths = dump_instance(instance, os.path.join(args.dump_dir, f"trial{trial:04d}"))
            got = result.discovered.best_cost.total_s if result.discovered else None
            want = result.reference.best_cost.total_s if result.reference else None
            print(f"trial {trial}: discover {got} != exhaustive {want}")
            print("repro written to " + ", ".join(paths))
            return EXIT_MISMATCH
        agreed += 1
    print(f"oracle: {agreed}/{args.trials} instances agree (seed {args.seed})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynapar", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def specs(p):
        p.add_argument("cluster")
        p.add_argument("model")
        p.add_argument("job")
        p.add_argument("--seed", type=int, default=None, help="override the job seed")

    p = sub.add_parser("plan", help="search for the best initial configuration")
    specs(p)
    p.add_argument("--emit", metavar="PLAN_JSON", help="write the chosen config here")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate a training run")
    specs(p)
    p.add_argument("--policy", choices=("static", "adaptive"), default="static")
    p.add_argument("--trace", default="trace.jsonl", help="JSONL path; a .csv is written alongside")
    p.add_argument("--plan", help="start from this plan document instead of searching")
    p.add_argument("--selector-config", help="JSON file of selector overrides")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="static vs adaptive on the same seed")
    specs(p)
    p.add_argument("--plan")
    p.add_argument("--selector-config")
    p.add_argument("--trace", help="write <root>.static.jsonl and <root>.adaptive.jsonl")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("oracle", help="cross-check discover against brute force")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cluster", help="fix the cluster instead of drawing one per trial")
    p.add_argument("--max-gpus", type=int, default=8)
    p.add_argument("--max-layers", type=int, default=6)
    p.add_argument("--dump-dir", default="oracle-repro")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
