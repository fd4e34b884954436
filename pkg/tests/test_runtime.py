import numpy as np
import pytest

from hflight.analytics import schedule_metrics
from hflight.data import DirichletSplitConfig, FederatedSubsets, federated_split, synth_blobs
from hflight.dataplane import ParamStore, SharedFileConnector
from hflight.model import ModelSpec, TrainConfig, evaluate, local_train
from hflight.runtime import (
    MAX_JOB_PAYLOAD,
    Job,
    JobKind,
    LauncherClosedError,
    LauncherNotConfiguredError,
    LocalLauncher,
    PayloadTooLargeError,
    RemoteLauncher,
    RoundError,
    RunContext,
    TopologyNotSupportedError,
    derive_seed,
    local_launcher,
    run_async_fl,
    run_sync_hfl,
    straggler_durations,
)
from hflight.strategy import FedAsync, FedAsyncAggr, FedAvg, FedAvgWorker, FedSGD, Strategy
from hflight.topology import NodeKind, balanced_tree, from_yaml, two_tier
from oracles import flat_fedavg

THREE_TIER = """
coordinator: {kind: coordinator, children: [left, right]}
left: {kind: aggregator, children: [w1, w2]}
right: {kind: aggregator, children: [w3, w4]}
w1: {kind: worker, children: []}
w2: {kind: worker, children: []}
w3: {kind: worker, children: []}
w4: {kind: worker, children: []}
"""


def blob_setup(topo, classes=3, dims=4, per_class=40, seed=0):
    data = synth_blobs(classes, dims, per_class, 1.0, seed)
    subsets = federated_split(data, topo.workers, DirichletSplitConfig(3.0, 1.0, seed))
    return ModelSpec.mlp(dims, classes, (8,)), subsets


def assert_tree_local(topo, ledger):
    pairs = topo.adjacent_pairs()
    assert ledger.edges() <= pairs


def test_submit_to_stopped_launcher():
    lnch = local_launcher("threads", 2)
    with pytest.raises(LauncherClosedError):
        lnch.submit(Job(JobKind.TRAIN, "w"))


def test_launcher_arguments():
    with pytest.raises(ValueError):
        LocalLauncher("gpu", 2)
    with pytest.raises(ValueError):
        LocalLauncher("threads", 0)


def test_remote_launcher_is_a_stub():
    with pytest.raises(LauncherNotConfiguredError, match="not configured"):
        RemoteLauncher().start(None)
    with pytest.raises(LauncherNotConfiguredError):
        RemoteLauncher().submit(Job(JobKind.TRAIN, "w"))


def _context(topo, model, subsets, lr=0.01):
    store = ParamStore.for_topology(topo)
    return RunContext(topo, FedAvg(), model, subsets, store, TrainConfig(lr, 1, 8))


def test_evaluate_job_matches_direct_call():
    topo = two_tier(2)
    model, subsets = blob_setup(topo)
    ctx = _context(topo, model, subsets)
    params = model.init_params(3)
    ref = ctx.store.put(params, "coordinator")
    with LocalLauncher("threads", 2) as lnch:
        lnch.start(ctx)
        res = lnch.submit(Job(JobKind.EVALUATE, "coordinator", 0, ref)).result()
    assert res.metrics == [evaluate(model, params, subsets.union())]
    assert res.node_kind is NodeKind.COORDINATOR


def test_train_job_zero_lr_returns_input():
    topo = two_tier(2)
    model, subsets = blob_setup(topo)
    ctx = _context(topo, model, subsets, lr=0.0)
    params = model.init_params(4)
    with LocalLauncher("threads", 2) as lnch:
        lnch.start(ctx)
        res = lnch.submit(Job(JobKind.TRAIN, "worker-0", 0, ctx.store.put(params, "coordinator"))).result()
    back = ctx.store.resolve(res.params, "coordinator")
    assert back.bitwise_equal(params)
    assert res.state == {"num_data_samples": subsets.num_samples("worker-0")}
    assert [t.dst for t in res.transfers] == ["worker-0"]


def test_job_shape_rules():
    with pytest.raises(ValueError):
        Job(JobKind.AGGREGATE, "a")
    with pytest.raises(ValueError):
        Job(JobKind.TRAIN, "w", children=("x",))


def test_sync_identity_pipeline():
    topo = two_tier(2)
    model, subsets = blob_setup(topo)
    init = model.init_params(9)
    recs = run_sync_hfl(
        topo, FedSGD(), model, subsets, 1, LocalLauncher("threads", 2), train=TrainConfig(0.0), init_params=init
    )
    assert recs[0].global_params.bitwise_equal(init)


def test_sync_matches_flat_oracle():
    topo = from_yaml(THREE_TIER)
    model, subsets = blob_setup(topo)
    train = TrainConfig(0.05, 2, 8)
    seed = 5
    recs = run_sync_hfl(topo, FedAvg(), model, subsets, 1, LocalLauncher("threads", 4), train=train, seed=seed)
    start = model.init_params(seed)
    local = {}
    for w in topo.workers:
        cfg = TrainConfig(train.learning_rate, train.epochs, train.batch_size, derive_seed(seed, w, 0))
        local[w] = local_train(model, start, subsets.data(w), cfg)[0].as_single()
    counts = {w: subsets.num_samples(w) for w in topo.workers}
    # intermediate aggregates travel at single precision
    np.testing.assert_allclose(recs[0].global_params.values, flat_fedavg(local, counts), rtol=0, atol=1e-6)
    assert recs[0].metrics.num_samples == subsets.total


def test_sync_record_shape_and_ledger():
    topo = from_yaml(THREE_TIER)
    model, subsets = blob_setup(topo)
    store = ParamStore.for_topology(topo)
    lnch = LocalLauncher("threads", 3)
    recs = run_sync_hfl(topo, FedAvg(), model, subsets, 3, lnch, store=store)
    assert [r.round for r in recs] == [0, 1, 2]
    assert all(r.bytes_moved == 2 * 6 * model.byte_size for r in recs)
    assert_tree_local(topo, store.ledger)
    # worker parameters never reach the coordinator directly
    assert not any(src.startswith("w") and dst == "coordinator" for src, dst in store.ledger.edges())
    assert lnch.max_payload_seen < MAX_JOB_PAYLOAD
    assert len(store.connector) == 0


def test_sync_barrier():
    topo, _ = balanced_tree(2, 3)
    model, subsets = blob_setup(topo)
    durations = {w: [0.01 * (i + 1)] for i, w in enumerate(topo.workers)}
    recs = run_sync_hfl(topo, FedAvg(), model, subsets, 1, LocalLauncher("threads", 8), durations=durations)
    timings = recs[0].timings
    for node in topo.bfs():
        kids = topo.children(node)
        if kids:
            start = timings[node][1]
            assert start >= max(timings[c][2] for c in kids)


def test_no_deadlock_with_one_slot():
    topo, _ = balanced_tree(2, 3)
    model, subsets = blob_setup(topo)
    recs = run_sync_hfl(topo, FedAvg(), model, subsets, 2, LocalLauncher("threads", 1))
    assert len(recs) == 2


def test_slot_count_does_not_change_results():
    topo = from_yaml(THREE_TIER)
    model, subsets = blob_setup(topo)
    a = run_sync_hfl(topo, FedAvg(), model, subsets, 3, LocalLauncher("threads", 1), seed=2)
    b = run_sync_hfl(topo, FedAvg(), model, subsets, 3, LocalLauncher("threads", 8), seed=2)
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
    assert all(x.global_params.bitwise_equal(y.global_params) for x, y in zip(a, b))


def test_processes_mode_matches_threads(tmp_path):
    topo = from_yaml(THREE_TIER)
    model, subsets = blob_setup(topo)
    store = ParamStore.for_topology(topo, SharedFileConnector(tmp_path))
    p = run_sync_hfl(topo, FedAvg(), model, subsets, 2, LocalLauncher("processes", 2), seed=1, store=store)
    t = run_sync_hfl(topo, FedAvg(), model, subsets, 2, LocalLauncher("threads", 2), seed=1)
    assert [r.to_json() for r in p] == [r.to_json() for r in t]
    assert p[-1].global_params.bitwise_equal(t[-1].global_params)
    assert store.ledger.total_bytes(round=0) == 2 * 6 * model.byte_size


def test_processes_mode_rejects_in_memory_store():
    topo = two_tier(2)
    model, subsets = blob_setup(topo)
    with pytest.raises(TypeError, match="process boundary"):
        run_sync_hfl(topo, FedAvg(), model, subsets, 1, LocalLauncher("processes", 1), store=ParamStore())


def test_partial_participation_uses_subtree():
    topo, _ = balanced_tree(2, 3)
    model, subsets = blob_setup(topo)
    store = ParamStore.for_topology(topo)
    recs = run_sync_hfl(topo, FedAvg(0.25), model, subsets, 4, LocalLauncher("threads", 4), store=store, seed=3)
    for r in recs:
        assert len(r.selected) == 2
        touched = {n for n in r.timings if ":" not in n}
        assert set(r.selected) <= touched
        assert not (set(topo.workers) - set(r.selected)) & touched
    assert_tree_local(topo, store.ledger)


def test_child_failure_aborts_round():
    topo = two_tier(3)
    model, full = blob_setup(topo)
    broken = FederatedSubsets(full.dataset, {w: full[w] for w in topo.workers[:2]})
    with pytest.raises(RoundError) as exc:
        run_sync_hfl(topo, FedAvg(), model, broken, 2, LocalLauncher("threads", 2))
    assert exc.value.node_id == "worker-2"
    assert exc.value.round == 0
    assert "KeyError" in exc.value.cause


def test_strategy_contract_error_surfaces():
    topo = from_yaml(THREE_TIER)
    model, subsets = blob_setup(topo)
    # FedAvg aggregation without the worker callback that records sample counts
    bad = Strategy(aggr_strategy=FedAvg().aggr_strategy)
    with pytest.raises(RoundError) as exc:
        run_sync_hfl(topo, bad, model, subsets, 1, LocalLauncher("threads", 2))
    assert exc.value.node_id in ("left", "right")
    assert "num_data_samples" in exc.value.cause


def test_payload_cap_enforced():
    topo = two_tier(2)
    model, subsets = blob_setup(topo)
    with pytest.raises(PayloadTooLargeError):
        run_sync_hfl(topo, FedAvg(), model, subsets, 1, LocalLauncher("threads", 2, payload_cap=16))


class RecordingAsync(FedAsyncAggr):
    def __init__(self, beta):
        super().__init__(beta)
        self.seen = []

    def update(self, global_params, incoming, worker, timestamp):
        self.seen.append((global_params.values.astype(np.float64), incoming.values.astype(np.float64)))
        return super().update(global_params, incoming, worker, timestamp)


def test_async_single_worker_recursion():
    topo = two_tier(1)
    model, subsets = blob_setup(topo)
    train = TrainConfig(0.05, 1, 8)
    recs = run_async_fl(topo, FedAsync(0.5), model, subsets, 3, LocalLauncher("threads", 1), train=train, seed=4)
    assert len(recs) == 3
    w = model.init_params(4)
    for r, rec in enumerate(recs):
        cfg = TrainConfig(0.05, 1, 8, derive_seed(4, "worker-0", r))
        local = local_train(model, w, subsets.data("worker-0"), cfg)[0].as_single()
        w = w.with_values(0.5 * w.values.astype(np.float64) + 0.5 * local.values.astype(np.float64)).as_single()
        assert rec.global_params.bitwise_equal(w)
        assert rec.extra == {"worker_round": r, "staleness": 0}


def test_async_event_count_and_order():
    topo = two_tier(4)
    model, subsets = blob_setup(topo)
    store = ParamStore.for_topology(topo)
    recs = run_async_fl(topo, FedAsync(0.5), model, subsets, 3, LocalLauncher("threads", 4), store=store)
    assert len(recs) == 12
    assert [r.round for r in recs] == list(range(12))
    assert sorted(r.selected[0] for r in recs) == sorted(topo.workers * 3)
    assert_tree_local(topo, store.ledger)
    assert store.ledger.total_bytes() == 12 * 2 * model.byte_size


def test_async_drift_bound():
    beta = 0.999
    topo = two_tier(3)
    model, subsets = blob_setup(topo)
    aggr = RecordingAsync(beta)
    strat = Strategy(aggr_strategy=aggr, worker_strategy=FedAvgWorker(), name="rec")
    recs = run_async_fl(topo, strat, model, subsets, 2, LocalLauncher("threads", 3), train=TrainConfig(0.1, 1, 8))
    max_update = max(np.linalg.norm(inc - glob) for glob, inc in aggr.seen)
    prev = model.init_params(0).values.astype(np.float64)
    for rec in recs:
        cur = rec.global_params.values.astype(np.float64)
        # allow for single-precision rounding of the stored global model
        assert np.linalg.norm(cur - prev) <= (1 - beta) * max_update + 1e-6
        prev = cur


def test_async_eval_stride():
    topo = two_tier(2)
    model, subsets = blob_setup(topo)
    recs = run_async_fl(topo, FedAsync(0.5), model, subsets, 3, LocalLauncher("threads", 2), eval_stride=4)
    assert recs[1].metrics == recs[0].metrics
    assert recs[-1].metrics == evaluate(model, recs[-1].global_params, subsets.union())


def test_async_rejects_deep_topology():
    topo = from_yaml(THREE_TIER)
    model, subsets = blob_setup(topo)
    with pytest.raises(TopologyNotSupportedError):
        run_async_fl(topo, FedAsync(0.5), model, subsets, 1, LocalLauncher("threads", 2))
    with pytest.raises(ValueError):
        run_async_fl(two_tier(2), FedAvg(), model, subsets, 1, LocalLauncher("threads", 2))


def test_async_beats_sync_with_straggler():
    topo = two_tier(6)
    model, subsets = blob_setup(topo)
    durations = straggler_durations(topo.workers, 4, base=0.02, factor=5.0, seed=1)
    sync = run_sync_hfl(topo, FedAvg(), model, subsets, 4, LocalLauncher("threads", 6), durations=durations)
    asyn = run_async_fl(topo, FedAsync(0.5), model, subsets, 4, LocalLauncher("threads", 6), durations=durations)
    s, a = schedule_metrics(sync), schedule_metrics(asyn)
    assert a.makespan < s.makespan
    assert a.mean_idle < s.mean_idle


def test_async_relaunch_gap_is_small():
    topo = two_tier(4)
    model, subsets = blob_setup(topo)
    durations = {w: [0.02] for w in topo.workers}
    durations["worker-0"] = [0.2]
    recs = run_async_fl(topo, FedAsync(0.5), model, subsets, 3, LocalLauncher("threads", 4), durations=durations)
    spans = {}
    for r in recs:
        (w,) = r.selected
        spans.setdefault(w, []).append(r.timings[w][1:])
    for w, iv in spans.items():
        if w == "worker-0":
            continue
        gaps = [(s2 - e1) / 1e9 for (_, e1), (s2, _) in zip(iv, iv[1:])]
        # fast workers never wait for the slow one
        assert max(gaps) < 0.1


def test_straggler_durations_rotate():
    d = straggler_durations([f"w{i}" for i in range(12)], 20, base=1.0, factor=5.0, seed=0)
    per_round = [[d[w][r] for w in d] for r in range(20)]
    assert all(sorted(r) == [1.0] * 11 + [5.0] for r in per_round)
    slow = {max(d, key=lambda w: d[w][r]) for r in range(20)}
    assert len(slow) > 1
