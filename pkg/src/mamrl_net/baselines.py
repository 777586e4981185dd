"""Shortest-path (SPA) and Q-routing controllers.

Both act through the same interface as the learned policies: given a
:class:`~mamrl_net.simulator.Network`, return one next hop (or NO_ACTION)
per router.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .simulator import NO_ACTION, Network, StepOutcome
from .topology import Topology, TopologyError


@dataclass
class SpaTable:
    """next_hop[i, d]: first hop on a min-hop path from i to d (-1 on the diagonal)."""

    next_hop: np.ndarray
    dist: np.ndarray
    stale: bool = False

    def lookup(self, router: int, dst: int) -> int:
        return int(self.next_hop[router, dst])


def build_spa(topo: Topology) -> SpaTable:
    """All-pairs Dijkstra with unit weights; ties go to the lowest next-hop id."""
    n = topo.n
    nh = np.full((n, n), -1, dtype=np.int64)
    dist = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        d = {src: 0}
        first: Dict[int, int] = {src: -1}
        heap = [(0, -1, src)]
        done = set()
        while heap:
            du, fh, u = heapq.heappop(heap)
            if u in done:
                continue
            done.add(u)
            for v in topo.neighbors(u):
                hop = v if u == src else fh
                cand = (du + 1, hop)
                if v not in d or cand < (d[v], first[v]):
                    d[v], first[v] = cand
                    heapq.heappush(heap, (du + 1, hop, v))
        if len(done) != n:
            raise TopologyError(f"{topo.name} is disconnected")
        for dst, dd in d.items():
            dist[src, dst] = dd
            nh[src, dst] = first[dst]
    return SpaTable(nh, dist)


def spa_action(table: SpaTable, router: int, head_dst: int) -> int:
    return table.lookup(router, head_dst)


class SpaController:
    """Static table routing; optionally rebuilt ``rebuild_delay`` episodes after a failure."""

    name = "spa"

    def __init__(self, topo: Topology, rebuild_delay: Optional[int] = None):
        self.topo = topo
        self.table = build_spa(topo)
        self.rebuild_delay = rebuild_delay
        self._failed_at: Optional[int] = None

    def act(self, net: Network) -> List[int]:
        acts = [NO_ACTION] * self.topo.n
        for r, q in enumerate(net.state.queues):
            if q:
                acts[r] = self.table.lookup(r, q[0].dst)
        return acts

    def observe_outcome(self, net: Network, actions, outcome: StepOutcome) -> None:
        pass

    def on_episode_start(self, episode: int, net: Network) -> None:
        if net.scenario.failed_edge is None:
            return
        if self._failed_at is None:
            self._failed_at = episode
            self.table.stale = True
        if self.rebuild_delay is not None and episode - self._failed_at >= self.rebuild_delay and self.table.stale:
            edges = tuple(e for e in self.topo.edges if (min(e[:2]), max(e[:2])) != net.scenario.failed_edge)
            self.table = build_spa(Topology(self.topo.name, self.topo.n, edges))


@dataclass
class QTable:
    """Q[x, d, y]: estimated steps to deliver a packet for d if x hands it to y."""

    q: np.ndarray
    eta: float = 0.7

    @classmethod
    def zeros(cls, n: int, eta: float = 0.7) -> "QTable":
        return cls(np.zeros((n, n, n)), eta)

    def best(self, topo: Topology, router: int, dst: int) -> float:
        if router == dst:
            return 0.0
        return float(min(self.q[router, dst, z] for z in topo.neighbors(router)))


def q_update(table: QTable, topo: Topology, x: int, d: int, y: int, queue_delay: float,
             transmit: float = 1.0) -> QTable:
    """Q(x,d,y) += eta * (q_y + s + min_z Q(y,d,z) - Q(x,d,y)); Q(d,d,.) stays 0."""
    if not topo.has_edge(x, y):
        raise ValueError(f"{y} is not a neighbor of {x}")
    if x == d:
        return table
    target = queue_delay + transmit + table.best(topo, y, d)
    table.q[x, d, y] += table.eta * (target - table.q[x, d, y])
    return table


def q_action(table: QTable, topo: Topology, router: int, head_dst: int,
             epsilon: float = 0.0, rng: Optional[np.random.Generator] = None) -> int:
    nbrs = topo.neighbors(router)
    if epsilon > 0 and rng is not None and rng.random() < epsilon:
        return int(nbrs[int(rng.integers(len(nbrs)))])
    vals = table.q[router, head_dst, nbrs]
    return int(nbrs[int(np.argmin(vals))])


class QRoutingController:
    """Boyan-Littman Q-routing; a dropped packet is charged ``loss_penalty`` steps."""

    name = "qroute"

    def __init__(self, topo: Topology, eta: float = 0.7, epsilon: float = 0.05,
                 epsilon_decay: float = 0.999, min_epsilon: float = 0.0,
                 loss_penalty: float = 100.0, seed: int = 0):
        self.topo = topo
        self.table = QTable.zeros(topo.n, eta)
        self.epsilon = epsilon
        self.epsilon_decay = epsilon_decay
        self.min_epsilon = min_epsilon
        self.loss_penalty = loss_penalty
        self.learning = True
        self.rng = np.random.default_rng(seed)
        self._pending: List[tuple] = []

    def act(self, net: Network) -> List[int]:
        acts = [NO_ACTION] * self.topo.n
        eps = self.epsilon if self.learning else 0.0
        self._pending = []
        for r, q in enumerate(net.state.queues):
            if q:
                d = q[0].dst
                acts[r] = q_action(self.table, self.topo, r, d, eps, self.rng)
                self._pending.append((r, d, acts[r], q[0]))
        return acts

    def observe_outcome(self, net: Network, actions, outcome: StepOutcome) -> None:
        if not self.learning:
            return
        for x, d, y, pkt in self._pending:
            if pkt.current_node != y:
                # dropped at x: the link could not carry it
                self.table.q[x, d, y] += self.table.eta * (self.loss_penalty - self.table.q[x, d, y])
                continue
            # steps the packet will wait at y: one per packet queued ahead of it
            wait = 0.0 if y == d else float(net.state.queues[y].index(pkt))
            q_update(self.table, self.topo, x, d, y, wait)

    def on_episode_start(self, episode: int, net: Network) -> None:
        self.epsilon = max(self.min_epsilon, self.epsilon * self.epsilon_decay)
