"""Dynamic average consensus over the router graph.

Each router i keeps a pair (x_i, y_i). Every round::

    x_i <- r_i - y_i
    y_i <- y_i + beta * sum_{j in N(i)} (x_i - x_j)

With y starting at zero the sum of y stays zero, so mean(x) equals mean(r)
exactly, and for a stable gain each x_i tracks the network average of r.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .topology import Topology


class ConsensusConfigError(ValueError):
    pass


def default_gain(topo: Topology) -> float:
    return 1.0 / (topo.max_degree + 1)


def stability_bound(topo: Topology) -> float:
    """Upper limit 2 / lambda_max(L) on the gain (unbounded for an edgeless graph)."""
    lam = float(np.linalg.eigvalsh(topo.laplacian())[-1])
    return 2.0 / lam if lam > 1e-12 else float("inf")


@dataclass
class ConsensusState:
    x: np.ndarray
    y: np.ndarray
    beta: float


@dataclass(frozen=True)
class RouterView:
    """Everything router i may read during one consensus round."""

    reward: float
    y: float
    x_self: float
    x_neighbors: tuple


def init_consensus(topo: Topology, beta: Optional[float] = None) -> ConsensusState:
    beta = default_gain(topo) if beta is None else float(beta)
    bound = stability_bound(topo)
    if not 0 < beta < bound:
        raise ConsensusConfigError(
            f"gain beta={beta} outside stability range (0, 2/lambda_max(L) = {bound:.6g})")
    return ConsensusState(np.zeros(topo.n), np.zeros(topo.n), beta)


def router_update(view: RouterView, beta: float) -> float:
    """New integrator value for one router from its local view only."""
    return view.y + beta * sum(view.x_self - xj for xj in view.x_neighbors)


def consensus_step(state: ConsensusState, rewards: Sequence[float], topo: Topology) -> ConsensusState:
    r = np.asarray(rewards, dtype=float)
    if r.shape != (topo.n,):
        raise ValueError(f"need one reward per router ({topo.n}), got shape {r.shape}")
    x = r - state.y
    y = np.array([
        router_update(RouterView(r[i], state.y[i], x[i], tuple(x[j] for j in topo.neighbors(i))),
                      state.beta)
        for i in range(topo.n)
    ])
    return ConsensusState(x, y, state.beta)


def estimate(state: ConsensusState, router: int) -> float:
    return float(state.x[router])


class FastConsensus:
    """Matrix form of :func:`consensus_step` for the rollout hot loop."""

    def __init__(self, topo: Topology, beta: Optional[float] = None):
        self.state = init_consensus(topo, beta)
        self._lap = topo.laplacian()

    def step(self, rewards: np.ndarray) -> np.ndarray:
        x = rewards - self.state.y
        self.state = ConsensusState(x, self.state.y + self.state.beta * (self._lap @ x), self.state.beta)
        return x

    def settle(self, rewards: np.ndarray, rounds: int) -> np.ndarray:
        """Run ``rounds`` extra rounds on a held input and return the last estimate."""
        x = self.step(rewards)
        for _ in range(rounds):
            x = self.step(rewards)
        return x
