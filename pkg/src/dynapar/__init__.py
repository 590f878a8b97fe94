"""Automatic hybrid-parallelism planning with runtime re-planning in simulation."""

from .comm import CommPlan, comm_optimize
from .cost_model import (
    CostBreakdown,
    LayerStrategy,
    MemoryFootprint,
    ParallelismConfig,
    estimate_iteration,
    memory_footprint,
)
from .profilers import profile_dataset, profile_hardware, profile_model
from .search import NoFeasibleStrategy, discover, exhaustive_plan
from .simulator import run
from .specs import parse_cluster_spec, parse_job_spec, parse_model_spec, validate

__version__ = "0.1.0"
