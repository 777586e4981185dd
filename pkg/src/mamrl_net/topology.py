"""Network topologies, link-failure scenarios and traffic matrices."""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_CAPACITY = 3.0
DEFAULT_PACKET_SIZE = 1.0

Edge = Tuple[int, int]

BUNDLED = {"b4": "b4.json", "geant": "geant.json", "att": "att.json"}


class TopologyError(ValueError):
    """Raised when a topology or traffic file is malformed or invalid."""


def _key(u: int, v: int) -> Edge:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class Topology:
    """Undirected router graph with per-link capacities (size-units per step)."""

    name: str
    n: int
    edges: Tuple[Tuple[int, int, float], ...]
    _adj: Tuple[Tuple[int, ...], ...] = field(init=False, repr=False, compare=False)
    _cap: Dict[Edge, float] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise TopologyError("topology needs at least one node")
        adj: List[set] = [set() for _ in range(self.n)]
        cap: Dict[Edge, float] = {}
        for idx, (u, v, c) in enumerate(self.edges):
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise TopologyError(f"edge {idx} ({u},{v}) references unknown node")
            if u == v:
                raise TopologyError(f"edge {idx} ({u},{v}) is a self-loop")
            if _key(u, v) in cap:
                raise TopologyError(f"edge {idx} ({u},{v}) is a duplicate")
            if not c > 0:
                raise TopologyError(f"edge {idx} ({u},{v}) has nonpositive capacity {c}")
            cap[_key(u, v)] = float(c)
            adj[u].add(v)
            adj[v].add(u)
        object.__setattr__(self, "_adj", tuple(tuple(sorted(a)) for a in adj))
        object.__setattr__(self, "_cap", cap)
        unreached = set(range(self.n)) - set(self.hop_distances(0))
        if unreached:
            raise TopologyError(f"topology is disconnected: node {min(unreached)} unreachable from 0")

    @property
    def nodes(self) -> List[int]:
        return list(range(self.n))

    @property
    def edge_keys(self) -> List[Edge]:
        return sorted(self._cap)

    def neighbors(self, node: int) -> List[int]:
        if not 0 <= node < self.n:
            raise KeyError(f"unknown router id {node}")
        return list(self._adj[node])

    def degree(self, node: int) -> int:
        return len(self._adj[node])

    @property
    def max_degree(self) -> int:
        return max(len(a) for a in self._adj)

    def has_edge(self, u: int, v: int) -> bool:
        return _key(u, v) in self._cap

    def capacity(self, u: int, v: int, scenario: Optional["FailureScenario"] = None) -> float:
        """Effective capacity of link (u, v); zero when the scenario fails it."""
        key = _key(u, v)
        if key not in self._cap:
            raise KeyError(f"no link ({u},{v})")
        if scenario is not None and scenario.failed_edge == key:
            return 0.0
        return self._cap[key]

    def hop_distances(self, source: int) -> Dict[int, int]:
        dist = {source: 0}
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in self._adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    def laplacian(self) -> np.ndarray:
        lap = np.zeros((self.n, self.n))
        for u, v in self._cap:
            lap[u, v] = lap[v, u] = -1.0
        lap[np.diag_indices(self.n)] = [len(a) for a in self._adj]
        return lap


def neighbors(topo: Topology, node: int) -> List[int]:
    return topo.neighbors(node)


@dataclass(frozen=True)
class FailureScenario:
    """A task: ``failed_edge`` is None for the intact network."""

    failed_edge: Optional[Edge] = None

    @classmethod
    def failing(cls, topo: Topology, u: int, v: int) -> "FailureScenario":
        if not topo.has_edge(u, v):
            raise TopologyError(f"cannot fail ({u},{v}): not an edge of {topo.name}")
        return cls(_key(u, v))

    @property
    def label(self) -> str:
        if self.failed_edge is None:
            return "none"
        return f"{self.failed_edge[0]}-{self.failed_edge[1]}"


NO_FAILURE = FailureScenario()


@dataclass(frozen=True)
class TaskDistribution:
    """Weights over the intact network plus one single-link failure per edge."""

    topology: Topology
    scenarios: Tuple[FailureScenario, ...]
    weights: Tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(w) != len(self.scenarios):
            raise ValueError("one weight per scenario required")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("weights must be nonnegative and sum to 1")
        for s in self.scenarios:
            if s.failed_edge is not None and not self.topology.has_edge(*s.failed_edge):
                raise TopologyError(f"scenario fails unknown edge {s.failed_edge}")

    @classmethod
    def uniform(cls, topo: Topology) -> "TaskDistribution":
        scen = (NO_FAILURE,) + tuple(FailureScenario(e) for e in topo.edge_keys)
        return cls(topo, scen, tuple([1.0 / len(scen)] * len(scen)))

    @classmethod
    def only(cls, topo: Topology, scenario: FailureScenario = NO_FAILURE) -> "TaskDistribution":
        return cls(topo, (scenario,), (1.0,))


def sample_task(dist: TaskDistribution, rng: np.random.Generator) -> FailureScenario:
    """Draw one scenario; a point-mass distribution consumes no randomness."""
    if len(dist.scenarios) == 1:
        return dist.scenarios[0]
    idx = rng.choice(len(dist.scenarios), p=np.asarray(dist.weights))
    return dist.scenarios[int(idx)]


@dataclass(frozen=True)
class TrafficMatrix:
    sizes: Dict[Edge, float] = field(default_factory=dict)
    default_size: float = DEFAULT_PACKET_SIZE

    def __post_init__(self):
        if not self.default_size > 0:
            raise TopologyError("default packet size must be positive")
        for (s, d), size in self.sizes.items():
            if s == d:
                raise TopologyError(f"traffic entry ({s},{d}) has src == dst")
            if not size > 0:
                raise TopologyError(f"traffic entry ({s},{d}) has nonpositive size {size}")

    def size(self, src: int, dst: int) -> float:
        return self.sizes.get((src, dst), self.default_size)


def topology_from_dict(doc: dict, default_capacity: float = DEFAULT_CAPACITY) -> Topology:
    try:
        n = int(doc["nodes"])
        edges = tuple(
            (int(e["u"]), int(e["v"]), float(e.get("capacity", default_capacity)))
            for e in doc["edges"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TopologyError(f"malformed topology document: {exc!r}") from exc
    return Topology(str(doc.get("name", "unnamed")), n, edges)


def load_topology(path, default_capacity: float = DEFAULT_CAPACITY) -> Topology:
    """Load a topology JSON file; bundled names ``b4``, ``geant``, ``att`` also resolve."""
    p = Path(path)
    if not p.exists() and str(path).lower() in BUNDLED:
        p = bundled_path(str(path).lower())
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise TopologyError(f"{p}: parse error at line {exc.lineno}: {exc.msg}") from exc
    return topology_from_dict(doc, default_capacity)


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("mamrl_net") / "data" / BUNDLED[name]))


def topology_to_dict(topo: Topology) -> dict:
    return {
        "name": topo.name,
        "nodes": topo.n,
        "edges": [{"u": u, "v": v, "capacity": c} for u, v, c in topo.edges],
    }


def load_traffic_matrix(path, topo: Optional[Topology] = None,
                        default_size: float = DEFAULT_PACKET_SIZE) -> TrafficMatrix:
    sizes: Dict[Edge, float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"src", "dst", "size"}:
            raise TopologyError(f"{path}: header must be src,dst,size")
        for lineno, row in enumerate(reader, start=2):
            try:
                s, d, size = int(row["src"]), int(row["dst"]), float(row["size"])
            except (TypeError, ValueError) as exc:
                raise TopologyError(f"{path}:{lineno}: {exc}") from exc
            if topo is not None and not (0 <= s < topo.n and 0 <= d < topo.n):
                raise TopologyError(f"{path}:{lineno}: unknown router in ({s},{d})")
            sizes[(s, d)] = size
    return TrafficMatrix(sizes, default_size)


def path_graph(n: int, capacity: float = DEFAULT_CAPACITY) -> Topology:
    return Topology(f"path{n}", n, tuple((i, i + 1, capacity) for i in range(n - 1)))


def from_edges(name: str, n: int, edges: Iterable[Sequence], capacity: float = DEFAULT_CAPACITY) -> Topology:
    return Topology(name, n, tuple((e[0], e[1], e[2] if len(e) > 2 else capacity) for e in edges))
