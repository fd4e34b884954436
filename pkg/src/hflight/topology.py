"""Hierarchical FL network topologies.

A topology is a rooted directed tree of coordinator, aggregator and worker
nodes. Topologies are loaded from (and written to) a YAML mapping of node id
to ``{kind, children, globus_compute_endpoint, proxystore_endpoint}``.
"""

from __future__ import annotations

import enum
import functools
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import yaml


class TopologyError(ValueError):
    """Base class for topology loading failures."""


class TopologyParseError(TopologyError):
    """The YAML text could not be parsed."""


class TopologySchemaError(TopologyError):
    """The YAML parsed but does not follow the node schema."""


class IllegalTopologyError(TopologyError):
    """The topology parsed but breaks one or more legality rules."""

    def __init__(self, violations: list[Violation]):
        self.violations = violations
        lines = "; ".join(str(v) for v in violations)
        super().__init__(f"illegal topology: {lines}")


class EmptySelectionError(ValueError):
    pass


class NodeKind(str, enum.Enum):
    COORDINATOR = "coordinator"
    AGGREGATOR = "aggregator"
    WORKER = "worker"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class NodeSpec:
    id: str
    kind: NodeKind
    children: tuple[str, ...] = ()
    compute_endpoint: str | None = None
    store_endpoint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", NodeKind(self.kind))
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True, order=True)
class Violation:
    """A single legality-rule violation.

    Rules: 1 rooted directed tree, 2 single coordinator at the root,
    3 at least one worker and workers are leaves, 4 aggregators are
    neither root nor leaf.
    """

    node: str
    rule: int
    message: str = field(compare=False)

    def __str__(self) -> str:
        return f"rule {self.rule} [{self.node}]: {self.message}"


@dataclass(frozen=True)
class CommCostParams:
    edges: int
    leaves: int
    height: int
    branching: int
    model_bytes: int


@dataclass(frozen=True)
class Topology:
    nodes: Mapping[str, NodeSpec]
    root: str

    def __post_init__(self):
        object.__setattr__(self, "nodes", dict(self.nodes))
        parents: dict[str, str] = {}
        for spec in self.nodes.values():
            for child in spec.children:
                parents.setdefault(child, spec.id)
        object.__setattr__(self, "_parents", parents)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: str) -> NodeSpec:
        return self.nodes[node_id]

    def kind(self, node_id: str) -> NodeKind:
        return self.nodes[node_id].kind

    def children(self, node_id: str) -> tuple[str, ...]:
        return self.nodes[node_id].children

    def parent(self, node_id: str) -> str | None:
        return self._parents.get(node_id)

    @property
    def workers(self) -> list[str]:
        """Worker ids in deterministic BFS order."""
        return [n for n in self.bfs() if self.kind(n) is NodeKind.WORKER]

    @property
    def aggregators(self) -> list[str]:
        return [n for n in self.bfs() if self.kind(n) is NodeKind.AGGREGATOR]

    def bfs(self) -> Iterator[str]:
        return iter(self._order)

    @functools.cached_property
    def _order(self) -> tuple[str, ...]:
        order = []
        seen = {self.root}
        queue = deque([self.root])
        while queue:
            node = queue.popleft()
            order.append(node)
            for child in self.nodes[node].children:
                if child in self.nodes and child not in seen:
                    seen.add(child)
                    queue.append(child)
        return tuple(order)

    def edges(self) -> list[tuple[str, str]]:
        return [(n, c) for n in self.bfs() for c in self.nodes[n].children]

    def depth(self, node_id: str) -> int:
        d = 0
        while node_id != self.root:
            node_id = self._parents[node_id]
            d += 1
        return d

    @property
    def height(self) -> int:
        return max(self.depth(w) for w in self.workers)

    def path_to_root(self, node_id: str) -> list[str]:
        path = [node_id]
        while path[-1] != self.root:
            path.append(self._parents[path[-1]])
        return path

    def is_two_tier(self) -> bool:
        return not self.aggregators and all(
            self.kind(c) is NodeKind.WORKER for c in self.children(self.root)
        )

    def adjacent_pairs(self) -> frozenset[tuple[str, str]]:
        """Both directions of every tree edge."""
        pairs = set()
        for a, b in self.edges():
            pairs.add((a, b))
            pairs.add((b, a))
        return frozenset(pairs)

    def comm_params(self, model_bytes: int) -> CommCostParams:
        branching = max(len(self.children(n)) for n in self.nodes if self.children(n))
        return CommCostParams(
            edges=len(self.edges()),
            leaves=len(self.workers),
            height=self.height,
            branching=branching,
            model_bytes=int(model_bytes),
        )

    @classmethod
    def from_yaml(cls, text: str) -> Topology:
        return from_yaml(text)

    def to_yaml(self) -> str:
        return to_yaml(self)


def validate(topology: Topology) -> list[Violation]:
    """Return every legality violation, sorted by node id then rule."""
    nodes = topology.nodes
    out: list[Violation] = []
    root = topology.root

    parents: dict[str, list[str]] = {n: [] for n in nodes}
    for spec in nodes.values():
        for child in spec.children:
            if child not in nodes:
                out.append(Violation(spec.id, 1, f"unknown child {child!r}"))
            else:
                parents[child].append(spec.id)
        if len(set(spec.children)) != len(spec.children):
            out.append(Violation(spec.id, 1, "duplicate child entries"))

    if root not in nodes:
        out.append(Violation(root, 1, "root is not a node"))
        return sorted(out)

    if parents[root]:
        out.append(Violation(root, 1, "root has a parent"))
    for node, ps in parents.items():
        if node != root and len(ps) == 0:
            out.append(Violation(node, 1, "node has no parent (second root or disconnected)"))
        elif len(set(ps)) > 1:
            out.append(Violation(node, 1, f"node has multiple parents {sorted(set(ps))}"))

    reachable = set(topology.bfs())
    for node in nodes:
        if node not in reachable and parents[node]:
            out.append(Violation(node, 1, "node unreachable from root (cycle)"))

    coordinators = [n for n, s in nodes.items() if s.kind is NodeKind.COORDINATOR]
    if nodes[root].kind is not NodeKind.COORDINATOR:
        out.append(Violation(root, 2, f"root must be a coordinator, got {nodes[root].kind}"))
    for c in coordinators:
        if c != root:
            out.append(Violation(c, 2, "coordinator must be the root"))

    workers = [n for n, s in nodes.items() if s.kind is NodeKind.WORKER]
    if not workers:
        out.append(Violation(root, 3, "topology has no worker"))
    for w in workers:
        if nodes[w].children:
            out.append(Violation(w, 3, "worker must be a leaf"))

    for n, s in nodes.items():
        if s.kind is NodeKind.AGGREGATOR:
            if n == root:
                out.append(Violation(n, 4, "aggregator cannot be the root"))
            if not s.children:
                out.append(Violation(n, 4, "aggregator cannot be a leaf"))

    return sorted(set(out))


_NODE_KEYS = {"kind", "children", "globus_compute_endpoint", "proxystore_endpoint"}


class _UniqueKeyLoader(yaml.SafeLoader):
    pass


def _construct_unique_mapping(loader, node, deep=False):
    keys = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in keys:
            raise TopologySchemaError(f"duplicate node id {key!r}")
        keys.add(key)
    return loader.construct_mapping(node, deep=deep)


_UniqueKeyLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_unique_mapping
)


def _opt_str(value) -> str | None:
    return None if value is None else str(value)


def from_yaml(text: str) -> Topology:
    """Parse and validate a topology from YAML text.

    Raises TopologyParseError, TopologySchemaError or IllegalTopologyError.
    """
    topo = parse_yaml(text)
    violations = validate(topo)
    if violations:
        raise IllegalTopologyError(violations)
    return topo


def parse_yaml(text: str) -> Topology:
    """Parse the node schema without checking legality."""
    try:
        raw = yaml.load(text, Loader=_UniqueKeyLoader)
    except TopologySchemaError:
        raise
    except yaml.YAMLError as exc:
        raise TopologyParseError(str(exc)) from exc
    if not isinstance(raw, dict) or not raw:
        raise TopologySchemaError("topology must be a nonempty mapping of node id to attributes")

    specs: dict[str, NodeSpec] = {}
    for node_id, attrs in raw.items():
        node_id = str(node_id)
        if not node_id:
            raise TopologySchemaError("empty node id")
        if not isinstance(attrs, dict):
            raise TopologySchemaError(f"node {node_id!r}: attributes must be a mapping")
        unknown = set(attrs) - _NODE_KEYS
        if unknown:
            raise TopologySchemaError(f"node {node_id!r}: unknown keys {sorted(unknown)}")
        for key in ("kind", "children"):
            if key not in attrs:
                raise TopologySchemaError(f"node {node_id!r}: missing {key!r}")
        try:
            kind = NodeKind(str(attrs["kind"]).lower())
        except ValueError:
            raise TopologySchemaError(f"node {node_id!r}: bad kind {attrs['kind']!r}") from None
        children = attrs["children"] or []
        if not isinstance(children, list):
            raise TopologySchemaError(f"node {node_id!r}: children must be a list")
        specs[node_id] = NodeSpec(
            id=node_id,
            kind=kind,
            children=tuple(str(c) for c in children),
            compute_endpoint=_opt_str(attrs.get("globus_compute_endpoint")),
            store_endpoint=_opt_str(attrs.get("proxystore_endpoint")),
        )

    return Topology(specs, _find_root(specs))


def load_yaml(path) -> Topology:
    with open(path, encoding="utf-8") as fh:
        return from_yaml(fh.read())


def _find_root(specs: Mapping[str, NodeSpec]) -> str:
    has_parent = {c for s in specs.values() for c in s.children}
    candidates = [n for n in specs if n not in has_parent]
    coords = [n for n in candidates if specs[n].kind is NodeKind.COORDINATOR]
    if coords:
        return coords[0]
    if candidates:
        return candidates[0]
    return next(iter(specs))


def to_yaml(topology: Topology) -> str:
    doc = {}
    for node_id in _emit_order(topology):
        spec = topology.nodes[node_id]
        doc[node_id] = {
            "kind": spec.kind.value,
            "children": list(spec.children),
            "globus_compute_endpoint": spec.compute_endpoint,
            "proxystore_endpoint": spec.store_endpoint,
        }
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


def _emit_order(topology: Topology) -> list[str]:
    order = list(topology.bfs())
    seen = set(order)
    order.extend(n for n in topology.nodes if n not in seen)
    return order


def balanced_tree(branching: int, height: int, model_bytes: int = 0) -> tuple[Topology, CommCostParams]:
    """Balanced tree with ``branching**height`` worker leaves.

    Node ids are ``coordinator``, ``aggr-<depth>-<i>`` and ``worker-<i>``.
    """
    if branching < 1 or height < 1:
        raise ValueError("branching and height must both be >= 1")
    leaves = branching**height
    if branching == 1:
        n_nodes = height + 1
    else:
        n_nodes = (branching ** (height + 1) - 1) // (branching - 1)
    if n_nodes > 10_000_000:
        raise OverflowError(f"balanced tree with {n_nodes} nodes is too large")

    specs: dict[str, NodeSpec] = {}
    level = ["coordinator"]
    kinds = {"coordinator": NodeKind.COORDINATOR}
    children: dict[str, list[str]] = {}
    for depth in range(1, height + 1):
        nxt = []
        for i, parent in enumerate(level):
            kids = []
            for j in range(branching):
                idx = i * branching + j
                name = f"worker-{idx}" if depth == height else f"aggr-{depth}-{idx}"
                kinds[name] = NodeKind.WORKER if depth == height else NodeKind.AGGREGATOR
                kids.append(name)
            children[parent] = kids
            nxt.extend(kids)
        level = nxt
    for name, kind in kinds.items():
        specs[name] = NodeSpec(name, kind, tuple(children.get(name, ())))

    edges = height if branching == 1 else n_nodes - 1
    topo = Topology(specs, "coordinator")
    return topo, CommCostParams(edges, leaves, height, branching, int(model_bytes))


def two_tier(n_workers: int, prefix: str = "worker") -> Topology:
    workers = [f"{prefix}-{i}" for i in range(n_workers)]
    specs = {"coordinator": NodeSpec("coordinator", NodeKind.COORDINATOR, tuple(workers))}
    specs.update({w: NodeSpec(w, NodeKind.WORKER) for w in workers})
    return Topology(specs, "coordinator")


def selected_subtree(topology: Topology, workers: Iterable[str]) -> Topology:
    """Minimal subtree spanning the root and the selected workers."""
    selected = set(workers)
    if not selected:
        raise EmptySelectionError("worker selection is empty")
    unknown = selected - set(topology.workers)
    if unknown:
        raise ValueError(f"not workers of this topology: {sorted(unknown)}")
    keep = set()
    for w in selected:
        keep.update(topology.path_to_root(w))
    specs = {}
    for node_id in topology.bfs():
        if node_id in keep:
            spec = topology.nodes[node_id]
            kids = tuple(c for c in spec.children if c in keep)
            specs[node_id] = NodeSpec(spec.id, spec.kind, kids, spec.compute_endpoint, spec.store_endpoint)
    return Topology(specs, topology.root)
