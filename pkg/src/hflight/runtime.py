"""Job launching and the synchronous and asynchronous execution engines.

The coordinator drives every round. It submits :class:`Job` records to a
:class:`Launcher` and gets back ``concurrent.futures.Future`` completion
handles. Jobs carry only proxy references and scalars; parameters move
through the :class:`~hflight.dataplane.ParamStore`.

Jobs that depend on other jobs (an aggregator on its children, a worker on
its parent's relayed copy of the global model) are held by the launcher
until those handles resolve, so blocked jobs never occupy an execution slot.
"""

from __future__ import annotations

import concurrent.futures as cf
import enum
import json
import logging
import multiprocessing
import pickle
import tempfile
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from hflight.data import FederatedSubsets, LabeledDataset
from hflight.dataplane import ParamStore, ProxyRef, SharedFileConnector, Transfer, iso8601
from hflight.model import LossReport, ModelSpec, ParamVector, TrainConfig, evaluate, local_train
from hflight.strategy import NodeState, Strategy, round_seed
from hflight.topology import NodeKind, Topology, selected_subtree

log = logging.getLogger(__name__)

MAX_JOB_PAYLOAD = 4096


class LauncherClosedError(RuntimeError):
    pass


class LauncherNotConfiguredError(RuntimeError):
    pass


class PayloadTooLargeError(ValueError):
    pass


class JobError(RuntimeError):
    """A job failed; ``node_id`` names the node where it originated."""

    def __init__(self, node_id: str, cause: str):
        self.node_id = node_id
        self.cause = cause
        super().__init__(node_id, cause)

    def __str__(self) -> str:
        return f"job on node {self.node_id!r} failed: {self.cause}"


class RoundError(RuntimeError):
    def __init__(self, round_idx: int, node_id: str, cause: str):
        self.round = round_idx
        self.node_id = node_id
        self.cause = cause
        super().__init__(round_idx, node_id, cause)

    def __str__(self) -> str:
        return f"round {self.round} aborted at node {self.node_id!r}: {self.cause}"


class TopologyNotSupportedError(ValueError):
    pass


class JobKind(str, enum.Enum):
    TRAIN = "train"
    AGGREGATE = "aggregate"
    EVALUATE = "evaluate"
    BROADCAST = "broadcast"


@dataclass(frozen=True)
class JobResult:
    node_id: str
    node_kind: NodeKind
    params: ProxyRef | None
    state: dict
    metrics: list[LossReport]
    start_ns: int
    end_ns: int
    transfers: list[Transfer] = field(default_factory=list)


@dataclass
class Job:
    """A unit of work for one node.

    ``children`` (aggregate jobs) and ``upstream`` (a worker or relay waiting
    for its parent's copy of the model) are completion handles when
    submitted; the launcher swaps them for their results before dispatch.
    """

    kind: JobKind
    node_id: str
    round: int = 0
    params: ProxyRef | None = None
    children: Sequence[Any] = ()
    upstream: Any = None
    seed: int = 0

    def __post_init__(self):
        self.kind = JobKind(self.kind)
        if self.kind is JobKind.AGGREGATE and not self.children:
            raise ValueError("aggregate jobs need at least one child handle")
        if self.kind is JobKind.TRAIN and self.children:
            raise ValueError("train jobs carry no child handles")

    def dependencies(self) -> list[cf.Future]:
        deps = [c for c in self.children if isinstance(c, cf.Future)]
        if isinstance(self.upstream, cf.Future):
            deps.append(self.upstream)
        return deps

    def payload_size(self) -> int:
        """Pickled size of the job with handles counted as node references."""
        stub = self._with(
            children=("<handle>",) * len(self.children),
            upstream=None if self.upstream is None else "<handle>",
        )
        return len(pickle.dumps(stub))

    def resolved(self) -> Job:
        children = tuple(c.result() if isinstance(c, cf.Future) else c for c in self.children)
        upstream = self.upstream.result() if isinstance(self.upstream, cf.Future) else self.upstream
        params = self.params
        if isinstance(upstream, JobResult):
            params = upstream.params
        return self._with(children=children, upstream=None, params=params)

    def _with(self, **changes) -> Job:
        # dataclasses.replace re-runs validation; this is on the per-job hot path
        out = object.__new__(Job)
        out.__dict__ = {**self.__dict__, **changes}
        return out


@dataclass
class RunContext:
    """Everything a job needs beyond its own record, installed once per run."""

    topology: Topology
    strategy: Strategy
    model: ModelSpec
    subsets: FederatedSubsets | None
    store: ParamStore
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_data: LabeledDataset | None = None
    durations: Mapping[str, Sequence[float]] | None = None

    def duration(self, worker: str, round_idx: int) -> float:
        if not self.durations or worker not in self.durations:
            return 0.0
        seq = self.durations[worker]
        return float(seq[round_idx % len(seq)])


def derive_seed(seed: int, worker: str, round_idx: int) -> int:
    return int(round_seed(seed, round_idx, worker).generate_state(1)[0])


def _train(job: Job, ctx: RunContext) -> JobResult:
    start = time.monotonic_ns()
    store = ctx.store.scoped()
    global_params = store.resolve(job.params, job.node_id, job.round)
    data = ctx.subsets.data(job.node_id)
    strat = ctx.strategy
    state = NodeState()
    state, data = strat.worker_strategy.before_training(state, data)
    cfg = replace(ctx.train, seed=derive_seed(job.seed, job.node_id, job.round))
    params, history = local_train(ctx.model, global_params, data, cfg, strat.trainer_strategy)
    state = strat.worker_strategy.after_training(state, params)
    pause = ctx.duration(job.node_id, job.round)
    if pause > 0:
        time.sleep(pause)
    ref = store.put(params, job.node_id)
    return JobResult(
        job.node_id, NodeKind.WORKER, ref, dict(state), history, start, time.monotonic_ns(), store.ledger.snapshot()
    )


def _aggregate(job: Job, ctx: RunContext) -> JobResult:
    start = time.monotonic_ns()
    store = ctx.store.scoped()
    children: list[JobResult] = list(job.children)
    params = {c.node_id: store.resolve(c.params, job.node_id, job.round) for c in children}
    states = {c.node_id: c.state for c in children}
    own = NodeState()
    agg = ctx.strategy.aggr_strategy.aggregate_params(own, states, params)
    ref = store.put(agg, job.node_id)
    history = [c.metrics[-1] for c in children if c.metrics]
    return JobResult(
        job.node_id, ctx.topology.kind(job.node_id), ref, dict(own), _merge_reports(history), start,
        time.monotonic_ns(), store.ledger.snapshot(),
    )


def _broadcast(job: Job, ctx: RunContext) -> JobResult:
    start = time.monotonic_ns()
    store = ctx.store.scoped()
    params = store.resolve(job.params, job.node_id, job.round)
    ref = store.put(params, job.node_id)
    return JobResult(
        job.node_id, ctx.topology.kind(job.node_id), ref, {}, [], start, time.monotonic_ns(), store.ledger.snapshot()
    )


def _evaluate(job: Job, ctx: RunContext) -> JobResult:
    start = time.monotonic_ns()
    store = ctx.store.scoped()
    params = store.resolve(job.params, job.node_id, job.round)
    data = ctx.eval_data if ctx.eval_data is not None else ctx.subsets.union()
    report = evaluate(ctx.model, params, data)
    return JobResult(
        job.node_id, ctx.topology.kind(job.node_id), job.params, {}, [report], start, time.monotonic_ns(),
        store.ledger.snapshot(),
    )


_HANDLERS: dict[JobKind, Callable[[Job, RunContext], JobResult]] = {
    JobKind.TRAIN: _train,
    JobKind.AGGREGATE: _aggregate,
    JobKind.BROADCAST: _broadcast,
    JobKind.EVALUATE: _evaluate,
}


def execute_job(job: Job, ctx: RunContext) -> JobResult:
    try:
        return _HANDLERS[job.kind](job, ctx)
    except JobError:
        raise
    except Exception as exc:
        raise JobError(job.node_id, f"{type(exc).__name__}: {exc}") from exc


_PROCESS_CTX: RunContext | None = None


def _install_context(ctx: RunContext) -> None:
    global _PROCESS_CTX
    _PROCESS_CTX = ctx


def _execute_in_process(job: Job) -> JobResult:
    return execute_job(job, _PROCESS_CTX)


def _run_into(handle: cf.Future, job: Job, ctx: RunContext) -> None:
    try:
        result = execute_job(job, ctx)
    except BaseException as exc:
        handle.set_exception(exc)
    else:
        handle.set_result(result)


def _merge_reports(reports: Sequence[LossReport]) -> list[LossReport]:
    if not reports:
        return []
    n = sum(r.num_samples for r in reports)
    loss = sum(r.loss * r.num_samples for r in reports) / n
    correct = sum(round(r.accuracy * r.num_samples) for r in reports)
    return [LossReport(loss, correct / n, n)]


class Launcher:
    """Asynchronous job submission returning completion handles."""

    mode = "abstract"
    slots = 1

    def start(self, context: RunContext) -> None:
        raise NotImplementedError

    def submit(self, job: Job) -> cf.Future:
        raise NotImplementedError

    def shutdown(self) -> None:
        raise NotImplementedError

    @property
    def running(self) -> bool:
        return False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


class LocalLauncher(Launcher):
    """Thread- or process-pool launcher for single-node simulation.

    Jobs are dispatched FIFO once their dependencies resolve. Process mode
    ships the run context to each pool process once, at start.
    """

    def __init__(self, mode: str = "threads", slots: int = 4, payload_cap: int = MAX_JOB_PAYLOAD):
        if mode not in ("threads", "processes"):
            raise ValueError("mode must be 'threads' or 'processes'")
        if slots < 1:
            raise ValueError("slots must be >= 1")
        self.mode = mode
        self.slots = slots
        self.payload_cap = payload_cap
        self._executor: cf.Executor | None = None
        self._ctx: RunContext | None = None
        self._lock = threading.Lock()
        self.max_payload_seen = 0

    @property
    def running(self) -> bool:
        return self._executor is not None

    def start(self, context: RunContext) -> None:
        if self._executor is not None:
            raise RuntimeError("launcher already started")
        self._ctx = context
        if self.mode == "threads":
            self._executor = cf.ThreadPoolExecutor(self.slots, thread_name_prefix="hflight")
        else:
            self._executor = cf.ProcessPoolExecutor(
                self.slots,
                mp_context=multiprocessing.get_context("spawn"),
                initializer=_install_context,
                initargs=(context,),
            )

    def shutdown(self) -> None:
        with self._lock:
            executor, self._executor = self._executor, None
        if executor is not None:
            executor.shutdown(wait=True)
        self._ctx = None

    def submit(self, job: Job) -> cf.Future:
        if self._executor is None:
            raise LauncherClosedError("launcher is not running")
        size = job.payload_size()
        self.max_payload_seen = max(self.max_payload_seen, size)
        if size > self.payload_cap:
            raise PayloadTooLargeError(f"job for {job.node_id!r} is {size} bytes; control payloads are capped at {self.payload_cap}")
        handle: cf.Future = cf.Future()
        handle.set_running_or_notify_cancel()
        deps = job.dependencies()
        if not deps:
            self._dispatch(job, handle)
            return handle

        remaining = [len(deps)]
        count_lock = threading.Lock()

        def on_done(_):
            with count_lock:
                remaining[0] -= 1
                ready = remaining[0] == 0
            if ready:
                self._release(job, handle)

        for dep in deps:
            dep.add_done_callback(on_done)
        return handle

    def _release(self, job: Job, handle: cf.Future) -> None:
        for dep in job.dependencies():
            exc = dep.exception()
            if exc is not None:
                handle.set_exception(exc)
                return
        try:
            self._dispatch(job.resolved(), handle)
        except Exception as exc:
            handle.set_exception(exc)

    def _dispatch(self, job: Job, handle: cf.Future) -> None:
        executor = self._executor
        if executor is None:
            raise LauncherClosedError("launcher is not running")
        if self.mode == "threads":
            executor.submit(_run_into, handle, job, self._ctx)
            return
        inner = executor.submit(_execute_in_process, job)

        def chain(f: cf.Future):
            exc = f.exception()
            if exc is not None:
                handle.set_exception(exc)
            else:
                handle.set_result(f.result())

        inner.add_done_callback(chain)


class RemoteLauncher(Launcher):
    """Placeholder for FaaS endpoint execution; no remote backend is configured."""

    mode = "remote"

    def __init__(self, endpoints: Mapping[str, str] | None = None):
        self.endpoints = dict(endpoints or {})

    def start(self, context: RunContext) -> None:
        raise LauncherNotConfiguredError("remote launcher not configured")

    def submit(self, job: Job) -> cf.Future:
        raise LauncherNotConfiguredError("remote launcher not configured")

    def shutdown(self) -> None:
        pass


def local_launcher(mode: str = "threads", slots: int = 4) -> LocalLauncher:
    return LocalLauncher(mode, slots)


@dataclass
class RoundRecord:
    round: int
    selected: list[str]
    metrics: LossReport
    timings: dict[str, tuple[str, int, int]]
    bytes_moved: int
    global_params: ParamVector | None = field(default=None, repr=False, compare=False)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Deterministic fields only; wall-clock timings go to :meth:`timing_rows`."""
        out = {
            "round": self.round,
            "selected": list(self.selected),
            "loss": self.metrics.loss,
            "accuracy": self.metrics.accuracy,
            "num_samples": self.metrics.num_samples,
            "bytes_moved": self.bytes_moved,
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def timing_rows(self, clock_offset_ns: int) -> list[dict]:
        return [
            {
                "round": self.round,
                "node": node,
                "kind": kind,
                "start_ns": s,
                "end_ns": e,
                "start": iso8601(s, clock_offset_ns),
                "end": iso8601(e, clock_offset_ns),
            }
            for node, (kind, s, e) in self.timings.items()
        ]


def default_store(launcher: Launcher, topology: Topology) -> ParamStore:
    if launcher.mode == "processes":
        return ParamStore.for_topology(topology, SharedFileConnector(tempfile.mkdtemp(prefix="hflight-store-")))
    return ParamStore.for_topology(topology)


class _Session:
    """Starts the launcher for a run unless the caller already did."""

    def __init__(self, launcher: Launcher, ctx: RunContext):
        self.launcher = launcher
        self.ctx = ctx
        self.owned = not launcher.running

    def __enter__(self):
        if self.owned:
            self.launcher.start(self.ctx)
        return self.launcher

    def __exit__(self, *exc):
        if self.owned:
            self.launcher.shutdown()


def _collect(result: JobResult, timings: dict, transfers: list) -> None:
    timings[result.node_id] = (result.node_kind.value if result.node_kind else "", result.start_ns, result.end_ns)
    transfers.extend(result.transfers)


def run_sync_hfl(
    topology: Topology,
    strategy: Strategy,
    model: ModelSpec,
    subsets: FederatedSubsets,
    rounds: int,
    launcher: Launcher,
    *,
    train: TrainConfig | None = None,
    seed: int = 0,
    store: ParamStore | None = None,
    init_params: ParamVector | None = None,
    eval_data: LabeledDataset | None = None,
    durations: Mapping[str, Sequence[float]] | None = None,
) -> list[RoundRecord]:
    """Synchronous hierarchical FL for ``rounds`` rounds.

    Each round the coordinator selects workers, relays the global model down
    the selected subtree, trains, aggregates bottom-up through the
    aggregators and finally aggregates its own children and evaluates.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    store = store if store is not None else default_store(launcher, topology)
    train = train or TrainConfig()
    ctx = RunContext(topology, strategy, model, subsets, store, train, eval_data, durations)
    global_params = (init_params or model.init_params(seed)).as_single()
    eval_data = eval_data if eval_data is not None else subsets.union()
    root = topology.root
    records = []

    with _Session(launcher, ctx) as lnch:
        for t in range(rounds):
            selected = strategy.coord_strategy.select_workers(topology, t, seed)
            sub = selected_subtree(topology, selected)
            global_ref = store.put(global_params, root)
            handles: dict[str, cf.Future] = {}
            relays: dict[str, cf.Future] = {}
            refs = [global_ref]

            # breadth-first submission; each aggregator gets its children's handles
            order = list(sub.bfs())
            for node in order[1:]:
                parent = sub.parent(node)
                upstream = relays.get(parent)
                params = global_ref if upstream is None else None
                if sub.kind(node) is NodeKind.AGGREGATOR:
                    relays[node] = lnch.submit(Job(JobKind.BROADCAST, node, t, params, (), upstream, seed))
                else:
                    handles[node] = lnch.submit(Job(JobKind.TRAIN, node, t, params, (), upstream, seed))
            for node in reversed(order[1:]):
                if sub.kind(node) is NodeKind.AGGREGATOR:
                    kids = tuple(handles[c] for c in sub.children(node))
                    handles[node] = lnch.submit(Job(JobKind.AGGREGATE, node, t, None, kids, None, seed))

            timings: dict = {}
            transfers: list[Transfer] = []
            try:
                # wait for everything so no job is left running into the next round
                cf.wait(list(handles.values()) + list(relays.values()))
                results = [handles[c].result() for c in sub.children(root)]
                for node in order[1:]:
                    for fut in (relays.get(node), handles.get(node)):
                        if fut is not None:
                            res = fut.result()
                            if fut is handles.get(node):
                                _collect(res, timings, transfers)
                            else:
                                transfers.extend(res.transfers)
                                timings.setdefault(f"{node}:relay", ("broadcast", res.start_ns, res.end_ns))
                            if res.params is not None:
                                refs.append(res.params)
            except JobError as exc:
                raise RoundError(t, exc.node_id, exc.cause) from exc

            start = time.monotonic_ns()
            coord_store = store.scoped()
            try:
                child_params = {r.node_id: coord_store.resolve(r.params, root, t) for r in results}
                own = NodeState()
                agg = strategy.aggr_strategy.aggregate_params(own, {r.node_id: r.state for r in results}, child_params)
            except Exception as exc:
                raise RoundError(t, root, f"{type(exc).__name__}: {exc}") from exc
            global_params = agg.as_single()
            report = evaluate(model, global_params, eval_data)
            timings[root] = (NodeKind.COORDINATOR.value, start, time.monotonic_ns())
            transfers.extend(coord_store.ledger.snapshot())

            store.ledger.extend(transfers)
            store.evict(refs)
            records.append(
                RoundRecord(t, list(selected), report, timings, sum(tr.bytes for tr in transfers), global_params)
            )
            log.info("round %d: loss=%.4f acc=%.4f", t, report.loss, report.accuracy)
    return records


def run_async_fl(
    topology: Topology,
    strategy: Strategy,
    model: ModelSpec,
    subsets: FederatedSubsets,
    rounds: int,
    launcher: Launcher,
    *,
    train: TrainConfig | None = None,
    seed: int = 0,
    store: ParamStore | None = None,
    init_params: ParamVector | None = None,
    eval_data: LabeledDataset | None = None,
    durations: Mapping[str, Sequence[float]] | None = None,
    eval_stride: int = 1,
) -> list[RoundRecord]:
    """Asynchronous two-tier FL: ``rounds`` local training jobs per worker.

    Every completed job is folded into the global model with the strategy's
    asynchronous update and yields one record; the worker is then relaunched
    from the current global model. Evaluation runs every ``eval_stride``
    events (and always on the last one); other records repeat the last report.
    """
    if not topology.is_two_tier():
        raise TopologyNotSupportedError("async execution requires a two-tier topology")
    cfg = strategy.async_config
    if cfg is None:
        raise ValueError("async execution requires a strategy with an asynchronous update")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    store = store if store is not None else default_store(launcher, topology)
    train = train or TrainConfig()
    ctx = RunContext(topology, strategy, model, subsets, store, train, eval_data, durations)
    global_params = (init_params or model.init_params(seed)).as_single()
    eval_data = eval_data if eval_data is not None else subsets.union()
    root = topology.root
    workers = topology.workers
    total_events = len(workers) * rounds
    records: list[RoundRecord] = []
    report = None
    version = 0

    with _Session(launcher, ctx) as lnch:
        done_rounds = {w: 0 for w in workers}
        launched_at: dict[str, int] = {}
        pending: dict[cf.Future, str] = {}

        def launch(worker: str):
            ref = store.put(global_params, root)
            launched_at[worker] = version
            job = Job(JobKind.TRAIN, worker, done_rounds[worker], ref, (), None, seed)
            fut = lnch.submit(job)
            pending[fut] = worker
            return ref

        live_refs = {w: launch(w) for w in workers}
        while pending:
            finished, _ = cf.wait(list(pending), return_when=cf.FIRST_COMPLETED)
            for fut in sorted(finished, key=lambda f: workers.index(pending[f])):
                worker = pending.pop(fut)
                try:
                    res: JobResult = fut.result()
                except JobError as exc:
                    for other in pending:
                        other.cancel()
                    raise RoundError(len(records), exc.node_id, exc.cause) from exc
                start = time.monotonic_ns()
                coord_store = store.scoped()
                incoming = coord_store.resolve(res.params, root, len(records))
                staleness = version - launched_at[worker]
                global_params = strategy.aggr_strategy.update(global_params, incoming, worker, version + 1).as_single()
                version += 1
                event = len(records)
                if report is None or event % eval_stride == 0 or event == total_events - 1:
                    report = evaluate(model, global_params, eval_data)
                transfers = [replace(tr, round=event) for tr in res.transfers] + coord_store.ledger.snapshot()
                store.ledger.extend(transfers)
                store.evict([live_refs[worker], res.params])
                timings = {
                    worker: (NodeKind.WORKER.value, res.start_ns, res.end_ns),
                    root: (NodeKind.COORDINATOR.value, start, time.monotonic_ns()),
                }
                records.append(
                    RoundRecord(
                        event, [worker], report, timings, sum(tr.bytes for tr in transfers), global_params,
                        {"worker_round": done_rounds[worker], "staleness": staleness},
                    )
                )
                done_rounds[worker] += 1
                if done_rounds[worker] < rounds:
                    live_refs[worker] = launch(worker)
    return records


def straggler_durations(
    workers: Sequence[str],
    rounds: int,
    base: float = 0.02,
    factor: float = 5.0,
    seed: int = 0,
) -> dict[str, list[float]]:
    """Synthetic per-(worker, round) training durations in seconds.

    In every round one worker, drawn uniformly from ``seed``, takes
    ``factor`` times the ``base`` duration; all others take ``base``.
    """
    rng = np.random.default_rng(seed)
    out = {w: [base] * rounds for w in workers}
    for r in range(rounds):
        slow = workers[int(rng.integers(len(workers)))]
        out[slow][r] = base * factor
    return out
