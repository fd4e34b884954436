"""Communication-cost model, ledger reconciliation and schedule metrics."""

from __future__ import annotations

import csv
import heapq
import io
import json
import statistics
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from hflight.dataplane import TransferLedger
from hflight.topology import CommCostParams, balanced_tree

KB = 1024
MB = 1024 * 1024

# Byte sizes of the reference models (2 params -> 8 bytes ... 60M -> 231 MB).
MODEL_BYTES = {
    "tinynet": 8,
    "smallnet": 242 * KB,
    "squeezenet": 5 * MB,
    "resnet18": 45 * MB,
    "resnet50": 98 * MB,
    "resnet152": 231 * MB,
}


class TopologyMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class CostReport:
    hierarchical_bytes: int
    two_tier_bytes: int
    savings_fraction: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def comm_cost(params: CommCostParams) -> CostReport:
    """Total model bytes moved in one round, hierarchical vs. two-tier.

    Hierarchical aggregation moves the model once down and once up every
    edge (``2*E*M``). Two-tier aggregation broadcasts the same way but every
    leaf's model travels all ``h`` hops back (``E*M + l*h*M``).
    """
    E, l, h, M = params.edges, params.leaves, params.height, params.model_bytes
    hier = 2 * E * M
    two_tier = E * M + l * h * M
    savings = 0.0 if two_tier == 0 else float(1 - Fraction(hier, two_tier))
    return CostReport(hier, two_tier, savings)


def model_bytes(name_or_bytes) -> int:
    if isinstance(name_or_bytes, int):
        return name_or_bytes
    key = str(name_or_bytes).lower().replace("-", "").replace("_", "")
    if key.isdigit():
        return int(key)
    if key not in MODEL_BYTES:
        raise KeyError(f"unknown model {name_or_bytes!r}; known: {sorted(MODEL_BYTES)}")
    return MODEL_BYTES[key]


def cost_table(leaves: int = 256, heights: Sequence[int] = (1, 2, 4, 8), models: Iterable[str] = MODEL_BYTES) -> list[dict]:
    """Savings for every (model, height) over balanced trees with ``leaves`` leaves."""
    rows = []
    for name in models:
        for h in heights:
            b = round(leaves ** (1.0 / h))
            if b**h != leaves:
                raise ValueError(f"{leaves} leaves has no integer branching for height {h}")
            _, cp = balanced_tree(b, h, MODEL_BYTES[name])
            rep = comm_cost(cp)
            rows.append(
                {
                    "model": name,
                    "h": h,
                    "hier_bytes": rep.hierarchical_bytes,
                    "two_tier_bytes": rep.two_tier_bytes,
                    "savings": rep.savings_fraction,
                }
            )
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["model", "h", "hier_bytes", "two_tier_bytes", "savings"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def verify_ledger_against_model(ledger: TransferLedger, params: CommCostParams, round: int | None = None) -> int:
    """Absolute difference between ledger payload bytes and ``2*E*M``.

    Pass ``round`` to restrict the ledger to a single round.
    """
    entries = [e for e in ledger.snapshot() if round is None or e.round == round]
    undirected = {frozenset((e.src, e.dst)) for e in entries}
    if len(undirected) > params.edges:
        raise TopologyMismatchError(
            f"ledger touches {len(undirected)} links but the model has {params.edges} edges"
        )
    payload = sum(e.bytes for e in entries)
    return abs(payload - 2 * params.edges * params.model_bytes)


@dataclass(frozen=True)
class ScheduleMetrics:
    makespan: float
    idle_fractions: dict[str, float]
    mean_idle: float
    std_idle: float

    def to_dict(self) -> dict:
        return asdict(self)


def interval_metrics(intervals: Mapping[str, Sequence[tuple[float, float]]]) -> ScheduleMetrics:
    """Metrics from per-worker busy intervals (seconds).

    A worker's idle fraction is ``1 - busy / span`` where the span runs from
    the earliest start across all workers to that worker's last completion.
    """
    if not intervals:
        return ScheduleMetrics(0.0, {}, 0.0, 0.0)
    t0 = min(s for iv in intervals.values() for s, _ in iv)
    t1 = max(e for iv in intervals.values() for _, e in iv)
    idle = {}
    for worker, iv in intervals.items():
        span = max(e for _, e in iv) - t0
        busy = sum(e - s for s, e in iv)
        idle[worker] = 0.0 if span <= 0 else min(1.0, max(0.0, 1.0 - busy / span))
    values = list(idle.values())
    std = statistics.pstdev(values) if len(values) > 1 else 0.0
    return ScheduleMetrics(t1 - t0, idle, statistics.fmean(values), std)


def schedule_metrics(records: Iterable, kind: str = "worker") -> ScheduleMetrics:
    """Schedule metrics over the ``kind`` nodes of a sequence of round records."""
    intervals: dict[str, list[tuple[float, float]]] = {}
    for rec in records:
        for node, (node_kind, s, e) in rec.timings.items():
            if node_kind == kind:
                intervals.setdefault(node, []).append((s / 1e9, e / 1e9))
    return interval_metrics(intervals)


def simulate_schedule(
    durations: Mapping[str, Sequence[float]], mode: str, aggregation_cost: float = 0.0
) -> dict[str, list[tuple[float, float]]]:
    """Discrete-event schedule of worker busy intervals with unlimited slots.

    ``sync``: every round starts when the slowest worker of the previous round
    has finished and the coordinator has aggregated. ``async``: each worker
    restarts as soon as its own result has been aggregated.
    """
    workers = list(durations)
    rounds = len(next(iter(durations.values())))
    out: dict[str, list[tuple[float, float]]] = {w: [] for w in workers}
    if mode == "sync":
        t = 0.0
        for r in range(rounds):
            ends = []
            for w in workers:
                out[w].append((t, t + durations[w][r]))
                ends.append(t + durations[w][r])
            t = max(ends) + aggregation_cost
    elif mode == "async":
        # single coordinator serializes aggregation; process events in time order
        heap = [(durations[w][0], i, w, 0.0) for i, w in enumerate(workers)]
        heapq.heapify(heap)
        next_r = {w: 0 for w in workers}
        coord_free = 0.0
        while heap:
            end, i, w, start = heapq.heappop(heap)
            out[w].append((start, end))
            done = max(end, coord_free) + aggregation_cost
            coord_free = done
            next_r[w] += 1
            if next_r[w] < rounds:
                heapq.heappush(heap, (done + durations[w][next_r[w]], i, w, done))
    else:
        raise ValueError("mode must be 'sync' or 'async'")
    return out
