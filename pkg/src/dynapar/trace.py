"""Per-step metric records and their JSON-lines / CSV serialisation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

SNAPSHOT_FIELDS = (
    "step",
    "iteration_time_s",
    "throughput_samples_s",
    "gpu_utilization",
    "memory_used_bytes",
    "comm_fraction",
    "stage_imbalance",
    "convergence_rate",
    "config_id",
)


@dataclass(frozen=True)
class MetricsSnapshot:
    step: int
    iteration_time_s: float
    throughput_samples_s: float
    gpu_utilization: float
    memory_used_bytes: float
    comm_fraction: float
    stage_imbalance: float
    convergence_rate: float
    config_id: str
    # observations the selector uses but the trace format does not carry
    headroom_fraction: float = 0.0
    input_bound: bool = False
    transition_s: float = 0.0
    model_total_s: float = 0.0
    device_slowdown: tuple[float, ...] = field(default=(), repr=False)
    link_scale: tuple[float, float] = (1.0, 1.0)

    def record(self) -> dict:
        return {name: getattr(self, name) for name in SNAPSHOT_FIELDS}


@dataclass(frozen=True)
class TransitionRecord:
    step: int
    from_id: str
    to_id: str
    bytes_moved: float
    pause_s: float
    flags: tuple[str, ...] = ()

    def record(self) -> dict:
        return {
            "event": "transition",
            "step": self.step,
            "from": self.from_id,
            "to": self.to_id,
            "bytes_moved": self.bytes_moved,
            "pause_s": self.pause_s,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class DecisionRecord:
    step: int
    action: str
    flags: tuple[str, ...]
    expected_gain_s_per_step: float = 0.0

    def record(self) -> dict:
        return {
            "event": "decision",
            "step": self.step,
            "action": self.action,
            "flags": list(self.flags),
            "expected_gain_s_per_step": self.expected_gain_s_per_step,
        }


@dataclass(frozen=True)
class TraceSummary:
    steps: int
    total_wall_clock_s: float
    mean_throughput: float
    transitions: int


@dataclass
class Trace:
    records: list = field(default_factory=list)
    closed: bool = False
    _last_step: int | None = field(default=None, init=False, repr=False)

    def append(self, record) -> None:
        if self.closed:
            raise RuntimeError("trace is closed")
        if isinstance(record, MetricsSnapshot):
            if self._last_step is not None and record.step <= self._last_step:
                raise ValueError("snapshot steps must be strictly increasing")
            self._last_step = record.step
        self.records.append(record)

    @property
    def snapshots(self) -> list[MetricsSnapshot]:
        return [r for r in self.records if isinstance(r, MetricsSnapshot)]

    @property
    def transitions(self) -> list[TransitionRecord]:
        return [r for r in self.records if isinstance(r, TransitionRecord)]

    @property
    def decisions(self) -> list[DecisionRecord]:
        return [r for r in self.records if isinstance(r, DecisionRecord)]

    def summary(self) -> TraceSummary:
        snaps = self.snapshots
        wall = math.fsum(s.iteration_time_s for s in snaps)
        mean = math.fsum(s.throughput_samples_s for s in snaps) / len(snaps) if snaps else 0.0
        return TraceSummary(len(snaps), wall, mean, len(self.transitions))

    def close(self) -> TraceSummary:
        self.closed = True
        return self.summary()

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.record()) + "\n" for r in self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SNAPSHOT_FIELDS)
        for s in self.snapshots:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in s.record().values()])
        return buf.getvalue()

    def write(self, path: str) -> tuple[str, str]:
        """Write ``path`` (JSON lines) and a CSV projection next to it."""
        csv_path = (path[:-6] if path.endswith(".jsonl") else path) + ".csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_jsonl())
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())
        return path, csv_path


def read_jsonl(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
