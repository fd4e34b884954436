"""Independent reference computations shared by the test modules."""

import numpy as np

from hflight.model import Layer, ParamVector
from hflight.strategy import fedavg_aggregate
from hflight.topology import NodeKind, NodeSpec, Topology


def random_tree(rng: np.random.Generator, max_levels: int = 4, max_workers: int = 32) -> Topology:
    """Random legal tree with at most ``max_levels`` levels below the root."""
    kids: dict[str, list[str]] = {"root": []}
    n_workers = int(rng.integers(1, max_workers + 1))
    names = iter(range(10_000))
    for w in range(n_workers):
        # walk down from the root, opening or reusing aggregators
        node, depth = "root", 1
        while depth < max_levels and rng.random() < 0.6:
            aggs = [c for c in kids[node] if c.startswith("a")]
            if aggs and rng.random() < 0.7:
                node = aggs[int(rng.integers(len(aggs)))]
            else:
                new = f"a{next(names)}"
                kids[node].append(new)
                kids[new] = []
                node = new
            depth += 1
        kids[node].append(f"w{w}")
        kids[f"w{w}"] = []
    specs = {}
    for n, ch in kids.items():
        kind = NodeKind.COORDINATOR if n == "root" else NodeKind.AGGREGATOR if n.startswith("a") else NodeKind.WORKER
        specs[n] = NodeSpec(n, kind, tuple(ch))
    return Topology(specs, "root")


def random_params(rng: np.random.Generator, workers, size: int = 7):
    layout = (Layer("w", 0, size, (size,)),)
    return {w: ParamVector(rng.normal(size=size) * 10, layout) for w in workers}


def recursive_fedavg(topo: Topology, params, counts, node=None):
    """Bottom-up aggregation through every aggregator, as the engine does it."""
    node = node or topo.root
    if topo.kind(node) is NodeKind.WORKER:
        return params[node], {"num_data_samples": counts[node]}
    child_params, child_states = {}, {}
    for c in topo.children(node):
        child_params[c], child_states[c] = recursive_fedavg(topo, params, counts, c)
    return fedavg_aggregate(child_params, child_states)


def flat_fedavg(params, counts) -> np.ndarray:
    n = sum(counts.values())
    return sum((counts[w] / n) * params[w].values for w in params)


def worker_timelines(durations, mode):
    """Hand-rolled schedule: sync waits for the slowest worker each round."""
    workers = list(durations)
    rounds = len(durations[workers[0]])
    out = {w: [] for w in workers}
    if mode == "sync":
        t = 0.0
        for r in range(rounds):
            for w in workers:
                out[w].append((t, t + durations[w][r]))
            t += max(durations[w][r] for w in workers)
    else:
        for w in workers:
            t = 0.0
            for r in range(rounds):
                out[w].append((t, t + durations[w][r]))
                t += durations[w][r]
    return out
