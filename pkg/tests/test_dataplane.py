import pickle
import threading

import numpy as np
import pytest

from hflight.analytics import MODEL_BYTES
from hflight.dataplane import (
    IllegalEdgeError,
    InMemoryConnector,
    ParamStore,
    SharedFileConnector,
    StoreClosedError,
    Transfer,
    TransferLedger,
    UnknownKeyError,
)
from hflight.model import Layer, ModelSpec, ParamVector, encode_header
from hflight.topology import balanced_tree, two_tier


def vec(n, seed=0):
    values = np.random.default_rng(seed).normal(size=n).astype(np.float32)
    return ParamVector(values, (Layer("w", 0, n, (n,)),))


@pytest.fixture(params=["memory", "file"])
def connector(request, tmp_path):
    return InMemoryConnector() if request.param == "memory" else SharedFileConnector(tmp_path / "store")


@pytest.mark.parametrize("n", [1, 1000, 10**7])
def test_round_trip_bitwise(n):
    store = ParamStore()
    x = vec(n, n)
    assert store.resolve(store.put(x, "a"), "b").bitwise_equal(x)


def test_round_trip_through_connector(connector):
    store = ParamStore(connector)
    x = vec(50)
    ref = store.put(x, "a")
    assert store.resolve(ref, "b").bitwise_equal(x)
    assert connector.get(ref.key) == connector.get(ref.key)


def test_put_quantizes_to_single():
    store = ParamStore()
    x = ParamVector(np.array([0.1, 1 / 3]), (Layer("w", 0, 2, (2,)),))
    back = store.resolve(store.put(x, "a"), "b")
    assert back.values.dtype == np.float32
    assert np.array_equal(back.values, x.values.astype(np.float32))


def test_self_resolve_not_logged():
    store = ParamStore()
    ref = store.put(vec(4), "a")
    store.resolve(ref, "a")
    assert len(store.ledger) == 0


def test_tinynet_ref_size():
    m = ModelSpec.tinynet()
    p = m.init_params()
    ref = ParamStore().put(p, "c")
    assert ref.payload_size == 8
    assert ref.byte_size == 8 + len(encode_header(p))


def test_smallnet_class_transfer_size():
    # a flat vector of the smallnet byte size
    n = MODEL_BYTES["smallnet"] // 4
    store = ParamStore()
    ref = store.put(vec(n), "c")
    store.resolve(ref, "w", round=2)
    (entry,) = store.ledger
    assert entry.bytes == MODEL_BYTES["smallnet"] == 242 * 1024
    assert entry.header_bytes == ref.header_size
    assert (entry.src, entry.dst, entry.round) == ("c", "w", 2)


def test_duplicate_puts_get_distinct_keys(connector):
    store = ParamStore(connector)
    x = vec(3)
    assert store.put(x, "a").key != store.put(x, "a").key


def test_resolve_twice_logs_twice():
    store = ParamStore()
    ref = store.put(vec(3), "a")
    store.resolve(ref, "b")
    store.resolve(ref, "b")
    assert len(store.ledger) == 2


def test_illegal_edge():
    topo, _ = balanced_tree(2, 2)
    store = ParamStore.for_topology(topo)
    ref = store.put(vec(3), "worker-0")
    with pytest.raises(IllegalEdgeError):
        store.resolve(ref, "coordinator")
    assert store.resolve(ref, "aggr-1-0").bitwise_equal(vec(3))


def test_unknown_key_and_closed(connector):
    store = ParamStore(connector)
    ref = store.put(vec(2), "a")
    store.evict([ref])
    with pytest.raises(UnknownKeyError):
        store.resolve(ref, "b")
    store.close()
    with pytest.raises(StoreClosedError):
        store.put(vec(2), "a")


def test_in_memory_connector_refuses_pickling():
    with pytest.raises(TypeError):
        pickle.dumps(InMemoryConnector())


def test_shared_file_store_pickles(tmp_path):
    store = ParamStore(SharedFileConnector(tmp_path))
    ref = store.put(vec(5), "a")
    clone = pickle.loads(pickle.dumps(store))
    assert clone.resolve(ref, "b").bitwise_equal(vec(5))
    assert len(clone.ledger) == 1 and len(store.ledger) == 0
    assert len(list(tmp_path.glob("*.bin"))) == 1


def test_empty_ledger_total():
    assert TransferLedger().total_bytes() == 0


def test_two_tier_round_hop_count():
    topo = two_tier(2)
    m = 64
    store = ParamStore.for_topology(topo)
    g = store.put(vec(m // 4), "coordinator")
    for w in topo.workers:
        store.resolve(g, w)
        store.resolve(store.put(vec(m // 4, 1), w), "coordinator")
    assert store.ledger.total_bytes() == 4 * m
    assert store.ledger.total_bytes(include_headers=True) == 4 * m + 4 * g.header_size


def test_ledger_filters():
    led = TransferLedger(
        [Transfer("a", "b", 10, 0, 1, 3), Transfer("b", "a", 20, 0, 2, 3), Transfer("a", "b", 5, 1, 3, 3)]
    )
    assert led.total_bytes(round=0) == 30
    assert led.total_bytes(edge=("a", "b")) == 15
    assert led.total_bytes(round=1, include_headers=True) == 8
    assert led.edges() == {("a", "b"), ("b", "a")}
    with pytest.raises(ValueError):
        led.append(Transfer("a", "b", 0, 0, 0))


def test_ledger_csv():
    led = TransferLedger([Transfer("c", "w", 8, 0, 0)])
    lines = led.to_csv(clock_offset_ns=0).splitlines()
    assert lines[0] == "from,to,bytes,round,timestamp"
    assert lines[1] == "c,w,8,0,1970-01-01T00:00:00.000000+00:00"


def test_concurrent_resolves():
    store = ParamStore()
    ref = store.put(vec(16), "a")

    def many():
        for _ in range(200):
            store.resolve(ref, "b")

    threads = [threading.Thread(target=many) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(store.ledger) == 1600
    assert store.ledger.total_bytes() == 1600 * 64


def test_scoped_store_has_own_ledger():
    store = ParamStore()
    ref = store.put(vec(2), "a")
    scoped = store.scoped()
    scoped.resolve(ref, "b")
    assert len(scoped.ledger) == 1 and len(store.ledger) == 0
