"""Four-part strategies and the built-in FedSGD, FedAvg, FedProx and FedAsync.

A :class:`Strategy` bundles one sub-strategy per role: coordinator (worker
selection), aggregator (parameter aggregation), worker (hooks around a local
training job) and trainer (hooks inside the training loop). New strategies
are usually composed from the defaults by overriding one or two callbacks.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from hflight.model import DimensionMismatchError, ParamVector
from hflight.topology import Topology


class StrategyContractError(RuntimeError):
    """A callback found state it relies on missing or malformed."""


class NodeState(dict):
    """Per-node key/value state shared by callbacks within a round."""

    def __setitem__(self, key, value):
        if key == "num_data_samples" and not (isinstance(value, (int, np.integer)) and value > 0):
            raise StrategyContractError(f"num_data_samples must be a positive integer, got {value!r}")
        super().__setitem__(key, value)


def _common_layout(params: Sequence[ParamVector]):
    if not params:
        raise ValueError("aggregation needs at least one child")
    layout = params[0].layout
    for p in params[1:]:
        if p.layout != layout:
            raise DimensionMismatchError("children parameter layouts differ")
    return layout


def average_params(params: Mapping[str, ParamVector], weights: Mapping[str, float] | None = None) -> ParamVector:
    """Weighted mean of parameter vectors; unweighted when ``weights`` is None.

    Summation follows the mapping's iteration order.
    """
    keys = list(params)
    vecs = [params[k] for k in keys]
    layout = _common_layout(vecs)
    if weights is None:
        w = np.full(len(keys), 1.0 / len(keys))
    else:
        w = np.array([float(weights[k]) for k in keys])
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("aggregation weights must be nonnegative with a positive sum")
        w = w / w.sum()
    acc = np.zeros(vecs[0].values.size)
    for wi, v in zip(w, vecs):
        acc += wi * v.values.astype(np.float64)
    return ParamVector(acc, layout)


def fedsgd_aggregate(children_params: Sequence[ParamVector] | Mapping[str, ParamVector]) -> ParamVector:
    if not isinstance(children_params, Mapping):
        children_params = {str(i): p for i, p in enumerate(children_params)}
    layout = _common_layout(list(children_params.values()))
    total = np.zeros(len(next(iter(children_params.values()))))
    for p in children_params.values():
        total += p.values.astype(np.float64)
    return ParamVector(total / len(children_params), layout)


def fedavg_aggregate(
    children_params: Mapping[str, ParamVector], children_states: Mapping[str, Mapping[str, Any]]
) -> tuple[ParamVector, NodeState]:
    """Sample-count weighted mean; the returned state carries the summed count."""
    weights = {}
    for node in children_params:
        state = children_states.get(node, {})
        if "num_data_samples" not in state:
            raise StrategyContractError(f"child {node!r} reported no num_data_samples")
        n_k = state["num_data_samples"]
        if not (isinstance(n_k, (int, np.integer)) and n_k > 0):
            raise StrategyContractError(f"child {node!r} has invalid num_data_samples {n_k!r}")
        weights[node] = int(n_k)
    own = NodeState()
    own["num_data_samples"] = sum(weights.values())
    return average_params(children_params, weights), own


def fedprox_penalty(params: ParamVector, global_params: ParamVector, mu: float) -> tuple[float, np.ndarray]:
    """Proximal term ``mu/2 * ||w - w_g||^2`` and its gradient."""
    if params.layout != global_params.layout:
        raise DimensionMismatchError("local and global layouts differ")
    diff = params.values.astype(np.float64) - global_params.values.astype(np.float64)
    return 0.5 * mu * float(diff @ diff), mu * diff


def fedprox_loss(loss: float, params: ParamVector, global_params: ParamVector, mu: float) -> float:
    penalty, _ = fedprox_penalty(params, global_params, mu)
    return loss + penalty


@dataclass
class AsyncConfig:
    """Step size for the asynchronous update plus per-worker timestamps."""

    beta: float = 0.5
    timestamps: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie strictly between 0 and 1")


def fedasync_update(
    global_params: ParamVector,
    incoming: ParamVector,
    cfg: AsyncConfig,
    worker: str | None = None,
    timestamp: int | None = None,
) -> ParamVector:
    """``beta * global + (1 - beta) * incoming``; records the worker's timestamp."""
    if global_params.layout != incoming.layout:
        raise DimensionMismatchError("global and incoming layouts differ")
    beta = cfg.beta
    out = beta * global_params.values.astype(np.float64) + (1.0 - beta) * incoming.values.astype(np.float64)
    if worker is not None:
        cfg.timestamps[worker] = timestamp if timestamp is not None else cfg.timestamps.get(worker, -1) + 1
    return ParamVector(out, global_params.layout)


def round_seed(seed: int, round_idx: int, key: str = "") -> np.random.SeedSequence:
    """Seed sequence for (seed, round, key) that is stable across processes."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(round_idx), zlib.crc32(key.encode())])


def select_workers(topology: Topology, round_idx: int, seed: int, participation: float = 1.0) -> list[str]:
    """Uniform sample of ``ceil(participation * |workers|)`` workers, in topology order."""
    if not 0.0 < participation <= 1.0:
        raise ValueError("participation must lie in (0, 1]")
    workers = topology.workers
    k = math.ceil(participation * len(workers))
    if k >= len(workers):
        return list(workers)
    rng = np.random.default_rng(round_seed(seed, round_idx, "select"))
    chosen = set(rng.choice(len(workers), size=k, replace=False).tolist())
    return [w for i, w in enumerate(workers) if i in chosen]


class CoordinatorStrategy:
    def __init__(self, participation: float = 1.0):
        if not 0.0 < participation <= 1.0:
            raise ValueError("participation must lie in (0, 1]")
        self.participation = participation

    def select_workers(self, topology: Topology, round_idx: int, seed: int) -> list[str]:
        selected = select_workers(topology, round_idx, seed, self.participation)
        if not selected:
            raise StrategyContractError("worker selection is empty")
        return selected


class AggregatorStrategy:
    def aggregate_params(
        self,
        state: NodeState,
        children_states: Mapping[str, Mapping[str, Any]],
        children_params: Mapping[str, ParamVector],
    ) -> ParamVector:
        return fedsgd_aggregate(children_params)


class WorkerStrategy:
    def before_training(self, state: NodeState, data):
        return state, data

    def after_training(self, state: NodeState, params: ParamVector) -> NodeState:
        return state


class TrainerStrategy:
    def modify_loss(self, loss: float, grad: np.ndarray, params: ParamVector, global_params: ParamVector):
        return loss, grad


# The built-ins below follow the names the defaults are known by.
DefaultCoordinatorStrategy = CoordinatorStrategy
DefaultAggregatorStrategy = AggregatorStrategy
DefaultWorkerStrategy = WorkerStrategy
DefaultTrainerStrategy = TrainerStrategy


class FedSGDCoordinator(CoordinatorStrategy):
    pass


class FedAvgAggr(AggregatorStrategy):
    def aggregate_params(self, state, children_states, children_params):
        params, own = fedavg_aggregate(children_params, children_states)
        state.update(own)
        return params


class FedAvgWorker(WorkerStrategy):
    def before_training(self, state, data):
        state["num_data_samples"] = len(data)
        return state, data


class FedProxTrainer(TrainerStrategy):
    def __init__(self, mu: float = 0.01):
        if mu < 0:
            raise ValueError("mu must be >= 0")
        self.mu = mu

    def modify_loss(self, loss, grad, params, global_params):
        if self.mu == 0:
            return loss, grad
        penalty, pgrad = fedprox_penalty(params, global_params, self.mu)
        return loss + penalty, grad + pgrad


class FedAsyncAggr(AggregatorStrategy):
    """Coordinator-side update applied as each worker result arrives."""

    def __init__(self, beta: float = 0.5):
        self.config = AsyncConfig(beta)

    def update(self, global_params: ParamVector, incoming: ParamVector, worker: str, timestamp: int) -> ParamVector:
        return fedasync_update(global_params, incoming, self.config, worker, timestamp)


@dataclass(frozen=True)
class Strategy:
    coord_strategy: CoordinatorStrategy = field(default_factory=CoordinatorStrategy)
    aggr_strategy: AggregatorStrategy = field(default_factory=AggregatorStrategy)
    worker_strategy: WorkerStrategy = field(default_factory=WorkerStrategy)
    trainer_strategy: TrainerStrategy = field(default_factory=TrainerStrategy)
    name: str = "custom"

    @property
    def is_async(self) -> bool:
        return isinstance(self.aggr_strategy, FedAsyncAggr)

    @property
    def async_config(self) -> AsyncConfig | None:
        return self.aggr_strategy.config if self.is_async else None


def FedSGD(participation: float = 1.0) -> Strategy:
    return Strategy(FedSGDCoordinator(participation), AggregatorStrategy(), WorkerStrategy(), TrainerStrategy(), "fedsgd")


def FedAvg(participation: float = 1.0) -> Strategy:
    return Strategy(FedSGDCoordinator(participation), FedAvgAggr(), FedAvgWorker(), TrainerStrategy(), "fedavg")


def FedProx(mu: float = 0.01, participation: float = 1.0) -> Strategy:
    return Strategy(FedSGDCoordinator(participation), FedAvgAggr(), FedAvgWorker(), FedProxTrainer(mu), "fedprox")


def FedAsync(beta: float = 0.5) -> Strategy:
    return Strategy(FedSGDCoordinator(1.0), FedAsyncAggr(beta), FedAvgWorker(), TrainerStrategy(), "fedasync")


STRATEGIES = ("fedsgd", "fedavg", "fedprox", "fedasync")


def strategy_from_name(name: str, mu: float = 0.01, beta: float = 0.5, participation: float = 1.0) -> Strategy:
    name = name.lower()
    if name == "fedsgd":
        return FedSGD(participation)
    if name == "fedavg":
        return FedAvg(participation)
    if name == "fedprox":
        return FedProx(mu, participation)
    if name == "fedasync":
        return FedAsync(beta)
    raise ValueError(f"unknown strategy {name!r}; choose from {STRATEGIES}")
