"""Gradient-communication plan: bucket fusion and compute overlap."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

DEFAULT_BUCKET_BYTES = 25_000_000
DEFAULT_OVERLAP_FACTOR = 0.8


@dataclass(frozen=True)
class CommPlan:
    fusion_enabled: bool = False
    bucket_bytes: int = DEFAULT_BUCKET_BYTES
    overlap_enabled: bool = False
    overlap_factor: float = 0.0

    def __post_init__(self):
        if self.bucket_bytes <= 0:
            raise ValueError("bucket_bytes must be > 0")
        if not 0.0 <= self.overlap_factor <= 1.0:
            raise ValueError("overlap_factor must lie in [0, 1]")

    def message_count(self, num_tensors: int, grad_bytes: float) -> int:
        """Messages one gradient sync issues: one per tensor, or one per bucket when fused."""
        if self.fusion_enabled:
            return math.ceil(grad_bytes / self.bucket_bytes)
        return num_tensors


def comm_optimize(config: Any = None, hw: Any = None, flags: Mapping[str, Any] | None = None) -> CommPlan:
    """Build the plan from ``enable_fusion`` / ``enable_overlap`` style flags.

    Fusion and overlap are on unless switched off; the plan does not depend on
    the parallel layout, ``config`` and ``hw`` are accepted so callers can pass
    their context uniformly.
    """
    flags = dict(flags or {})
    fusion = bool(flags.get("enable_fusion", True))
    overlap = bool(flags.get("enable_overlap", True))
    factor = float(flags.get("overlap_factor", DEFAULT_OVERLAP_FACTOR)) if overlap else 0.0
    return CommPlan(
        fusion_enabled=fusion,
        bucket_bytes=int(flags.get("bucket_bytes", DEFAULT_BUCKET_BYTES)),
        overlap_enabled=overlap,
        overlap_factor=factor,
    )
