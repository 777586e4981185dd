"""Multi-agent trajectory collection and consensus-based policy gradients.

Each router i sees only its own (observation, action, reward estimate)
stream. The reward estimate is e_t = own_loss_reward_t + x_t where x_t is
the router's consensus estimate of the network-average delay reward.

Two delay signals are available. "delivery" credits minus the delivery time
of each packet when it reaches its destination router. "accrual" charges
every packet one unit per step it spends in the network, booked at its
destination router, so the same total cost is paid as the packet ages
instead of in one lump at arrival (and stranded packets are not free).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import policy as nn
from .consensus import FastConsensus
from .policy import PolicyParams
from .simulator import NO_ACTION, Network, local_rewards, observation_indices, observation_width

RIDGE = 1e-5


@dataclass
class PGConfig:
    alpha: float = 0.01
    k: int = 10
    horizon: int = 500
    beta: Optional[float] = None
    reward_mode: str = "consensus"      # "local": e = own loss + own delivery reward, no consensus
    delay_signal: str = "accrual"       # "delivery": delivery time when a packet arrives
    charge_in_flight: bool = True
    settle_rounds: int = 200
    reward_to_go: bool = True
    discount: float = 0.95
    normalize_advantages: bool = True
    use_baseline: bool = True
    max_grad_norm: Optional[float] = None
    loss_weight: float = 1.0            # scales the own-loss term of e_t

    def with_(self, **kw) -> "PGConfig":
        return replace(self, **kw)


#: literal estimator: full-episode return, no truncation charge, no centering
LITERAL = PGConfig(delay_signal="delivery", discount=1.0, charge_in_flight=False,
                   reward_to_go=False, normalize_advantages=False)


@dataclass
class RouterTrajectory:
    """One router's record of one episode (H + 1 decision epochs).

    Observations are only meaningful on decision steps; idle rows of
    ``obs_idx`` are left at zero and never read.
    """

    n: int
    horizon: int
    obs_idx: np.ndarray       # (T, 12) positions of the ones in each encoded observation
    masks: np.ndarray         # (T, n) bool
    actions: np.ndarray       # (T,), NO_ACTION where the queue was empty
    rewards: np.ndarray       # (T,) e_t

    @property
    def length(self) -> int:
        return len(self.actions)

    def obs_vectors(self, steps: Optional[np.ndarray] = None) -> np.ndarray:
        idx = self.obs_idx if steps is None else self.obs_idx[steps]
        x = np.zeros((len(idx), observation_width(self.n)))
        rows = np.repeat(np.arange(len(idx)), idx.shape[1])
        x[rows, idx.ravel()] = 1.0
        return x

    def decision_steps(self) -> np.ndarray:
        return np.flatnonzero(self.actions != NO_ACTION)


@dataclass
class EpisodeMetrics:
    delivered: int
    lost: int
    total_delay: float
    mean_reward: float
    injected: int

    @property
    def avg_delivery_time(self) -> Optional[float]:
        return self.total_delay / self.delivered if self.delivered else None


@dataclass
class StepRecord:
    """Per-epoch signals passed to ``run_episode``'s ``step_hook``."""

    outcome: object
    r_loss: np.ndarray
    r_delay: np.ndarray
    estimate: np.ndarray


@dataclass
class Batch:
    """K episodes; ``per_router[i]`` holds router i's K trajectories."""

    per_router: List[List[RouterTrajectory]]
    metrics: List[EpisodeMetrics]

    def router(self, i: int) -> List[RouterTrajectory]:
        return self.per_router[i]


def summarize(metrics: Sequence[EpisodeMetrics]) -> dict:
    delivered = sum(m.delivered for m in metrics)
    delay = sum(m.total_delay for m in metrics)
    k = max(len(metrics), 1)
    return {
        "avg_delivery_time": delay / delivered if delivered else None,
        "delivered_frac": delivered / max(sum(m.injected for m in metrics), 1),
        "packet_loss": sum(m.lost for m in metrics) / k,
        "mean_reward": sum(m.mean_reward for m in metrics) / k,
    }


def action_masks(net: Network) -> np.ndarray:
    n = net.topo.n
    masks = np.zeros((n, n), dtype=bool)
    for r in range(n):
        masks[r, net.topo.neighbors(r)] = True
    return masks


def in_flight_charge(net: Network) -> np.ndarray:
    """Per destination router, minus the summed age of packets still queued."""
    charge = np.zeros(net.topo.n)
    clock = net.state.clock
    for q in net.state.queues:
        for p in q:
            charge[p.dst] -= clock - p.birth_time
    return charge


def in_flight_count(net: Network, delivered_to: List[List[int]]) -> np.ndarray:
    """Per destination router, minus the packets that spent this step in the network."""
    cost = np.array([-float(len(t)) for t in delivered_to])
    for q in net.state.queues:
        for p in q:
            cost[p.dst] -= 1.0
    return cost


def step_rewards(net: Network, out, cfg: PGConfig, last: bool = False):
    """(own-loss reward, delay reward) per router for one epoch under ``cfg``."""
    r_loss, r_delay = local_rewards(out)
    if cfg.loss_weight != 1.0:
        r_loss = cfg.loss_weight * r_loss
    if cfg.delay_signal == "accrual":
        r_delay = in_flight_count(net, out.delivery_times_to)
    elif last and cfg.charge_in_flight:
        r_delay = r_delay + in_flight_charge(net)
    return r_loss, r_delay


def run_episode(net: Network, policies: Sequence[PolicyParams], rng: np.random.Generator,
                seed: int, cfg: PGConfig = PGConfig(), record: bool = True,
                step_hook: Optional[Callable[[int, StepRecord], None]] = None):
    """Roll out one episode of ``cfg.horizon + 1`` epochs.

    Returns (per-router trajectories or None, metrics). With
    ``cfg.charge_in_flight`` the final epoch also charges every undelivered
    packet its age at its destination router and lets the consensus estimate
    settle for that epoch; otherwise stranded packets would cost nothing.
    ``step_hook(t, StepRecord)`` runs after every epoch.
    """
    topo = net.topo
    n = topo.n
    net.reset(seed)
    cons = FastConsensus(topo, cfg.beta)
    masks = action_masks(net)
    steps = cfg.horizon + 1
    obs_idx = np.zeros((n, steps, 12), dtype=np.int64) if record else None
    acts = np.full((n, steps), NO_ACTION, dtype=np.int64)
    rew = np.zeros((n, steps))
    delivered = lost = 0
    delay = greward = 0.0
    for t in range(steps):
        net.inject()
        actions = [NO_ACTION] * n
        queues = net.state.queues
        for r in range(n):
            if not queues[r]:
                continue
            hot = observation_indices(net.observe(r), n)
            if record:
                obs_idx[r, t] = hot
            actions[r] = nn.sample_action(nn.forward_hot(policies[r], hot, masks[r]), rng)
        out = net.step(actions)
        last = t == steps - 1
        r_loss, r_delay = step_rewards(net, out, cfg, last)
        if cfg.reward_mode == "local":
            e = r_loss + r_delay
        elif last and cfg.charge_in_flight:
            e = r_loss + cons.settle(r_delay, cfg.settle_rounds)
        else:
            e = r_loss + cons.step(r_delay)
        acts[:, t] = actions
        rew[:, t] = e
        delivered += len(out.delivered)
        delay += sum(dt for _, dt in out.delivered)
        lost += out.n_lost
        greward += float(r_loss.mean() + r_delay.mean())
        if step_hook is not None:
            step_hook(t, StepRecord(out, r_loss, r_delay, e))
    # router-mean of sum_t (own loss + network-average delay reward); in consensus mode this
    # equals the router-mean of the consensus returns since consensus preserves the mean
    metrics = EpisodeMetrics(delivered, lost, delay, greward, net.state.injected)
    trajs = None
    if record:
        trajs = [RouterTrajectory(n, cfg.horizon, obs_idx[r], np.repeat(masks[r][None], steps, 0),
                                  acts[r], rew[r]) for r in range(n)]
    return trajs, metrics


def episode_seeds(rng: np.random.Generator, k: int) -> List[int]:
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=k)]


def collect_trajectories(net: Network, policies: Sequence[PolicyParams], k: int, horizon: int,
                         rng: np.random.Generator, cfg: PGConfig = PGConfig()) -> Batch:
    """Sample K episodes; per-episode seeds are drawn from ``rng`` up front."""
    if k < 1:
        raise ValueError("K must be >= 1")
    cfg = cfg.with_(horizon=horizon)
    per_router: List[List[RouterTrajectory]] = [[] for _ in range(net.topo.n)]
    metrics = []
    for s in episode_seeds(rng, k):
        ep_rng = np.random.default_rng(s ^ 0x5DEECE66D)
        trajs, m = run_episode(net, policies, ep_rng, s, cfg)
        for r, tr in enumerate(trajs):
            per_router[r].append(tr)
        metrics.append(m)
    return Batch(per_router, metrics)


def trajectory_return(traj: RouterTrajectory) -> float:
    return float(np.sum(traj.rewards))


def returns_to_go(rewards: np.ndarray, discount: float = 1.0) -> np.ndarray:
    if discount == 1.0:
        return np.cumsum(rewards[::-1])[::-1].copy()
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out


@dataclass
class LinearBaseline:
    """Linear value predictor on (obs, t/H, (t/H)^2, 1)."""

    coef: np.ndarray

    @staticmethod
    def features(obs: np.ndarray, steps: np.ndarray, horizon: int) -> np.ndarray:
        tt = np.asarray(steps, dtype=float)[:, None] / max(horizon, 1)
        return np.hstack([obs, tt, tt * tt, np.ones_like(tt)])

    def predict(self, obs: np.ndarray, steps: np.ndarray, horizon: int) -> np.ndarray:
        return self.features(obs, steps, horizon) @ self.coef

    def predict_steps(self, traj: RouterTrajectory, steps: np.ndarray) -> np.ndarray:
        return self.predict(traj.obs_vectors(steps), steps, traj.horizon)


def fit_linear(features: np.ndarray, targets: np.ndarray, ridge: float = RIDGE) -> np.ndarray:
    """Ridge least squares; identical rows fall back to predicting the target mean."""
    if features.shape[0] == 0:
        return np.zeros(features.shape[1])
    if np.all(features == features[0]):
        coef = np.zeros(features.shape[1])
        coef[-1] = float(np.mean(targets))
        return coef
    gram = features.T @ features
    rhs = features.T @ targets
    reg = ridge
    for _ in range(5):
        try:
            coef = np.linalg.solve(gram + reg * np.eye(gram.shape[0]), rhs)
            if np.all(np.isfinite(coef)):
                return coef
        except np.linalg.LinAlgError:
            pass
        reg *= 10
    return np.linalg.lstsq(features, targets, rcond=None)[0]


def fit_baseline(trajs: Sequence[RouterTrajectory], ridge: float = RIDGE,
                 discount: float = 1.0) -> LinearBaseline:
    """Fit returns-to-come at one router's decision steps."""
    feats, targets = [], []
    for tr in trajs:
        steps = tr.decision_steps()
        feats.append(LinearBaseline.features(tr.obs_vectors(steps), steps, tr.horizon))
        targets.append(returns_to_go(tr.rewards, discount)[steps])
    return LinearBaseline(fit_linear(np.vstack(feats), np.concatenate(targets), ridge))


def policy_gradient(params: PolicyParams, trajs: Sequence[RouterTrajectory],
                    baseline: Optional[LinearBaseline] = None, reward_to_go: bool = False,
                    normalize_advantages: bool = False, discount: float = 1.0) -> PolicyParams:
    """Score-function gradient (1/K) sum_tau sum_t grad log pi(a_t|o_t) (R - b).

    ``R`` is the full episode return, or the (discounted) return from t
    onward when ``reward_to_go`` is set. Idle epochs add nothing.
    """
    if not trajs:
        raise ValueError("empty batch")
    xs, ms, acts, advs = [], [], [], []
    for tr in trajs:
        steps = tr.decision_steps()
        if len(steps) == 0:
            continue
        if reward_to_go:
            ret = returns_to_go(tr.rewards, discount)[steps]
        else:
            ret = np.full(len(steps), tr.rewards.sum())
        if baseline is not None:
            ret = ret - baseline.predict_steps(tr, steps)
        xs.append(tr.obs_vectors(steps))
        ms.append(tr.masks[steps])
        acts.append(tr.actions[steps])
        advs.append(ret)
    if not xs:
        return params.zeros_like()
    adv = np.concatenate(advs)
    if normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    g = nn.batch_logprob_grad(params, np.vstack(xs), np.vstack(ms), np.concatenate(acts), adv)
    return nn.scale(g, 1.0 / len(trajs))


def batch_gradients(policies: Sequence[PolicyParams], batch: Batch, cfg: PGConfig) -> List[PolicyParams]:
    """Per-router gradients; router i's estimate reads only router i's trajectories."""
    grads = []
    for i, params in enumerate(policies):
        trajs = batch.router(i)
        base = fit_baseline(trajs, discount=cfg.discount) if cfg.use_baseline else None
        grads.append(policy_gradient(params, trajs, base, cfg.reward_to_go,
                                     cfg.normalize_advantages, cfg.discount))
    if cfg.max_grad_norm is not None:
        norm = nn.grad_norm(grads)
        if norm > cfg.max_grad_norm:
            grads = [nn.scale(g, cfg.max_grad_norm / norm) for g in grads]
    return grads


def train_step(policies: Sequence[PolicyParams], net: Network, cfg: PGConfig,
               rng: np.random.Generator):
    """Collect K episodes, fit baselines, take one ascent step per router."""
    batch = collect_trajectories(net, policies, cfg.k, cfg.horizon, rng, cfg)
    grads = batch_gradients(policies, batch, cfg)
    if cfg.alpha == 0:
        new = [p.copy() for p in policies]
    else:
        new = [nn.apply_update(p, g, cfg.alpha) for p, g in zip(policies, grads)]
    return new, summarize(batch.metrics)


def init_policies(n: int, rng: np.random.Generator, hidden: Sequence[int] = nn.HIDDEN) -> List[PolicyParams]:
    return [nn.init_params(n, rng, hidden) for _ in range(n)]
