"""Discrete-time packet-level network simulator.

One step is: Poisson injection, every router with a nonempty queue picks a
next hop for its head packet, transmissions are resolved against per-link
capacity budgets in ascending sender order, and the clock advances.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .topology import NO_FAILURE, FailureScenario, Topology, TrafficMatrix

NO_PACKET = -1
NO_ACTION = -1
HISTORY_LEN = 10


class ContractError(RuntimeError):
    """A caller violated an operation's preconditions (a bug, not a network event)."""


class Packet:
    __slots__ = ("id", "src", "dst", "size", "birth_time", "current_node", "hops")

    def __init__(self, id: int, src: int, dst: int, size: float, birth_time: int):
        if src == dst:
            raise ValueError("packet source equals destination")
        if not size > 0:
            raise ValueError("packet size must be positive")
        self.id = id
        self.src = src
        self.dst = dst
        self.size = size
        self.birth_time = birth_time
        self.current_node = src
        self.hops = 0

    def __repr__(self):
        return (f"Packet(id={self.id}, {self.src}->{self.dst}, at={self.current_node}, "
                f"born={self.birth_time}, hops={self.hops})")


@dataclass
class SimConfig:
    load: float = 0.3
    horizon: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.load < 0:
            raise ValueError("load must be nonnegative")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class NetworkState:
    clock: int
    queues: List[deque]
    scenario: FailureScenario
    rng: np.random.Generator
    injected: int = 0
    delivered: int = 0
    lost: int = 0
    next_id: int = 0

    def queue_lengths(self) -> List[int]:
        return [len(q) for q in self.queues]

    def in_flight(self) -> int:
        return sum(len(q) for q in self.queues)

    def check_conservation(self) -> None:
        if self.injected != self.delivered + self.lost + self.in_flight():
            raise AssertionError(
                f"conservation violated: injected={self.injected} delivered={self.delivered} "
                f"lost={self.lost} queued={self.in_flight()}")
        for r, q in enumerate(self.queues):
            for p in q:
                if p.current_node != r:
                    raise AssertionError(f"{p} queued at router {r}")


@dataclass
class StepOutcome:
    delivered: List[Tuple[Packet, int]]
    losses_per_router: np.ndarray
    delivery_times_to: List[List[int]]

    @property
    def n_lost(self) -> int:
        return int(self.losses_per_router.sum())


@dataclass(frozen=True)
class Observation:
    head_dst: int
    last_actions: Tuple[int, ...]
    longest_queue_neighbor: int


def reset(topo: Topology, scenario: FailureScenario = NO_FAILURE,
          config: Optional[SimConfig] = None) -> NetworkState:
    config = config or SimConfig()
    if scenario.failed_edge is not None and not topo.has_edge(*scenario.failed_edge):
        raise ContractError(f"scenario fails {scenario.failed_edge}, not an edge")
    return NetworkState(clock=0, queues=[deque() for _ in range(topo.n)],
                        scenario=scenario, rng=np.random.default_rng(config.seed))


def inject_traffic(state: NetworkState, topo: Topology, load: float,
                   traffic: Optional[TrafficMatrix] = None,
                   rng: Optional[np.random.Generator] = None,
                   pairs: Optional[Sequence[Tuple[int, int]]] = None) -> int:
    """Add Poisson(load) packets with uniformly drawn ordered (src, dst) pairs.

    ``pairs`` restricts the draw to a fixed demand list.
    """
    rng = state.rng if rng is None else rng
    if load <= 0 or topo.n < 2:
        return 0
    k = int(rng.poisson(load))
    for _ in range(k):
        if pairs:
            src, dst = pairs[int(rng.integers(len(pairs)))]
        else:
            src = int(rng.integers(topo.n))
            dst = int(rng.integers(topo.n - 1))
            if dst >= src:
                dst += 1
        size = traffic.size(src, dst) if traffic is not None else 1.0
        pkt = Packet(state.next_id, src, dst, size, state.clock)
        state.next_id += 1
        state.queues[src].append(pkt)
    state.injected += k
    return k


def apply_actions(state: NetworkState, topo: Topology, actions: Sequence[int]) -> StepOutcome:
    """Forward head packets; losses occur when a link's per-step budget is exhausted."""
    n = topo.n
    if len(actions) != n:
        raise ContractError(f"expected {n} actions, got {len(actions)}")
    moving = []
    for r in range(n):
        a = int(actions[r])
        if a == NO_ACTION:
            continue
        if not state.queues[r]:
            raise ContractError(f"router {r} acted with an empty queue")
        if not topo.has_edge(r, a):
            raise ContractError(f"router {r} forwarded to non-neighbor {a}")
        moving.append((r, a, state.queues[r].popleft()))

    losses = np.zeros(n, dtype=np.int64)
    times_to: List[List[int]] = [[] for _ in range(n)]
    delivered: List[Tuple[Packet, int]] = []
    budget: Dict[Tuple[int, int], float] = {}
    clock_after = state.clock + 1
    for r, a, pkt in moving:
        key = (r, a) if r < a else (a, r)
        remaining = budget.get(key)
        if remaining is None:
            remaining = topo.capacity(r, a, state.scenario)
        if pkt.size > remaining:
            losses[r] += 1
            state.lost += 1
            budget[key] = remaining
            continue
        budget[key] = remaining - pkt.size
        pkt.hops += 1
        pkt.current_node = a
        if a == pkt.dst:
            dt = clock_after - pkt.birth_time
            delivered.append((pkt, dt))
            times_to[a].append(dt)
            state.delivered += 1
        else:
            state.queues[a].append(pkt)
    state.clock = clock_after
    return StepOutcome(delivered, losses, times_to)


def observe(state: NetworkState, topo: Topology, router: int,
            action_history: Sequence[int] = ()) -> Observation:
    q = state.queues[router]
    head = q[0].dst if q else NO_PACKET
    recent = list(action_history)[-HISTORY_LEN:]
    padded = (NO_ACTION,) * (HISTORY_LEN - len(recent)) + tuple(int(a) for a in recent)
    best, best_len = -1, -1
    for j in topo.neighbors(router):
        if len(state.queues[j]) > best_len:
            best, best_len = j, len(state.queues[j])
    return Observation(head, padded, best)


def observation_width(n: int) -> int:
    return 12 * n + 11


def observation_indices(obs: Observation, n: int) -> List[int]:
    """Positions of the ones in ``encode_observation(obs)``."""
    block = n + 1
    idx = [n if obs.head_dst == NO_PACKET else obs.head_dst]
    for k, a in enumerate(obs.last_actions):
        idx.append(block * (k + 1) + (n if a == NO_ACTION else a))
    idx.append(block * (HISTORY_LEN + 1) + obs.longest_queue_neighbor)
    return idx


def encode_observation(obs: Observation, topo_or_n) -> np.ndarray:
    """One-hot head destination, ten one-hot past actions, one-hot busiest neighbor."""
    n = topo_or_n if isinstance(topo_or_n, int) else topo_or_n.n
    vec = np.zeros(observation_width(n))
    vec[observation_indices(obs, n)] = 1.0
    return vec


def local_rewards(outcome: StepOutcome) -> Tuple[np.ndarray, np.ndarray]:
    """Per-router (negative own losses, negative mean delivery time of packets delivered to it)."""
    r_loss = -outcome.losses_per_router.astype(float)
    r_delay = np.array([-float(np.mean(t)) if t else 0.0 for t in outcome.delivery_times_to])
    return r_loss, r_delay


class ActionHistory:
    """Per-router record of the last ten next hops actually taken."""

    def __init__(self, n: int):
        self._hist = [deque(maxlen=HISTORY_LEN) for _ in range(n)]

    def record(self, actions: Sequence[int]) -> None:
        for r, a in enumerate(actions):
            if a != NO_ACTION:
                self._hist[r].append(int(a))

    def __getitem__(self, router: int) -> Tuple[int, ...]:
        return tuple(self._hist[router])


@dataclass
class Network:
    """Convenience wrapper bundling state, topology and per-router action history."""

    topo: Topology
    scenario: FailureScenario = NO_FAILURE
    config: SimConfig = field(default_factory=SimConfig)
    traffic: Optional[TrafficMatrix] = None
    check: bool = False
    pairs: Optional[Tuple[Tuple[int, int], ...]] = None

    def __post_init__(self):
        self.reset()

    def reset(self, seed: Optional[int] = None) -> NetworkState:
        if seed is not None:
            self.config = SimConfig(self.config.load, self.config.horizon, seed)
        self.state = reset(self.topo, self.scenario, self.config)
        self.history = ActionHistory(self.topo.n)
        return self.state

    def set_scenario(self, scenario: FailureScenario) -> None:
        if scenario.failed_edge is not None and not self.topo.has_edge(*scenario.failed_edge):
            raise ContractError(f"scenario fails {scenario.failed_edge}, not an edge")
        self.scenario = scenario
        self.state.scenario = scenario

    def inject(self) -> int:
        return inject_traffic(self.state, self.topo, self.config.load, self.traffic, pairs=self.pairs)

    def observe(self, router: int) -> Observation:
        return observe(self.state, self.topo, router, self.history[router])

    def active_routers(self) -> List[int]:
        return [r for r, q in enumerate(self.state.queues) if q]

    def step(self, actions: Sequence[int]) -> StepOutcome:
        out = apply_actions(self.state, self.topo, actions)
        self.history.record(actions)
        if self.check:
            self.state.check_conservation()
        return out
