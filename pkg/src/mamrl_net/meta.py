"""Meta-initialization over failure scenarios and online adaptation.

``maml_train`` learns an initialization theta* from which a couple of
policy-gradient steps fit any single-link failure scenario. ``online_adapt``
runs the live control loop: keep training, and when any router sees
sustained packet loss put every router back to theta* and adapt from there.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence

import numpy as np

from . import policy as nn
from . import training as tr
from .policy import PolicyParams
from .simulator import Network, SimConfig
from .topology import NO_FAILURE, FailureScenario, TaskDistribution, Topology, sample_task

MANIFEST = "manifest.json"


@dataclass
class MetaHyper:
    alpha: float = 0.01
    k: int = 10
    horizon: int = 500
    task_batch: int = 5
    iters: int = 500
    load: float = 0.3

    def __post_init__(self):
        if self.k < 1 or self.horizon < 1 or self.task_batch < 1 or self.iters < 0:
            raise ValueError(f"invalid meta hyperparameters: {self}")
        if self.alpha < 0 or self.load < 0:
            raise ValueError("alpha and load must be nonnegative")


@dataclass
class MetaParams:
    policies: List[PolicyParams]
    hyper: MetaHyper
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def copy_policies(self) -> List[PolicyParams]:
        return [p.copy() for p in self.policies]


def _pg_config(hyper: MetaHyper, base: Optional[tr.PGConfig]) -> tr.PGConfig:
    base = base or tr.PGConfig()
    return base.with_(alpha=hyper.alpha, k=hyper.k, horizon=hyper.horizon)


def maml_train(dist: TaskDistribution, hyper: MetaHyper, rng: np.random.Generator,
               init: Optional[Sequence[PolicyParams]] = None, pg: Optional[tr.PGConfig] = None,
               hidden: Sequence[int] = nn.HIDDEN, seed: Optional[int] = None,
               progress: Optional[Callable[[int, dict], None]] = None) -> MetaParams:
    """First-order meta-training.

    Per meta-iteration and per sampled task: one inner step theta_hat = theta +
    alpha g(theta), then the outer gradient g(theta_hat) from fresh rollouts at
    theta_hat. The outer step is taken from the adapted point, and the new
    parameters are the task average of theta_hat + alpha g(theta_hat). With a
    single task this is exactly two chained ``train_step`` calls.
    """
    topo = dist.topology
    cfg = _pg_config(hyper, pg)
    theta = list(init) if init is not None else tr.init_policies(topo.n, rng, hidden)
    theta = [p.copy() for p in theta]
    for it in range(hyper.iters):
        acc: Optional[List[np.ndarray]] = None
        summaries = []
        for _ in range(hyper.task_batch):
            task = sample_task(dist, rng)
            net = Network(topo, task, SimConfig(hyper.load, hyper.horizon, 0))
            adapted, _ = tr.train_step(theta, net, cfg, rng)
            final, summ = tr.train_step(adapted, net, cfg, rng)
            summaries.append(summ)
            flat = [p.flat() for p in final]
            acc = flat if acc is None else [a + f for a, f in zip(acc, flat)]
        theta = [p.with_flat(a / hyper.task_batch) for p, a in zip(theta, acc)]
        if progress is not None:
            progress(it, {k: float(np.mean([s[k] for s in summaries if s[k] is not None]))
                          if any(s[k] is not None for s in summaries) else None
                          for k in summaries[0]})
    return MetaParams(theta, hyper, seed)


# ---------------------------------------------------------------------------
# failure detection

@dataclass(frozen=True)
class FailureDetector:
    window: int = 50
    threshold: float = 5

    def __post_init__(self):
        if self.window < 1 or not self.threshold > 0:
            raise ValueError("need window >= 1 and threshold > 0")


def detect_failure(loss_history: Sequence[float], detector: FailureDetector) -> bool:
    """True iff the losses over the last ``window`` steps total at least ``threshold``."""
    recent = list(loss_history)[-detector.window:]
    return float(sum(recent)) >= detector.threshold


class LossMonitor:
    """Rolling per-router loss windows; each router only reads its own counts."""

    def __init__(self, n: int, detector: FailureDetector):
        self.detector = detector
        self.windows = [deque(maxlen=detector.window) for _ in range(n)]
        self.sums = np.zeros(n)

    def clear(self) -> None:
        for w in self.windows:
            w.clear()
        self.sums[:] = 0

    def push(self, losses: np.ndarray) -> bool:
        fired = False
        for r, w in enumerate(self.windows):
            if len(w) == w.maxlen:
                self.sums[r] -= w[0]
            w.append(float(losses[r]))
            self.sums[r] += float(losses[r])
            if self.sums[r] >= self.detector.threshold:
                fired = True
        return fired


# ---------------------------------------------------------------------------
# online adaptation

@dataclass
class EpisodeReport:
    episode: int
    scenario: FailureScenario
    avg_delivery_time: Optional[float]
    packet_loss: int
    mean_reward: float
    adapted: bool
    detected_at: Optional[int] = None


Schedule = Callable[[int], FailureScenario]


def failure_schedule(events: dict) -> Schedule:
    """``{episode: scenario}`` -> scenario in force at each episode (intact before the first)."""
    keys = sorted(events)

    def at(ep: int) -> FailureScenario:
        cur = NO_FAILURE
        for k in keys:
            if k <= ep:
                cur = events[k]
        return cur

    return at


class OnlineAdapter:
    """Continual policy-gradient training with resets to the meta-initialization.

    Episodes are rolled out one at a time and an update is taken every K
    episodes, using the same per-episode seeding as ``train_step``. When any
    router's loss window fires, every router is put back to theta* and the
    partial batch is dropped. After a reset, detection is disarmed until an
    episode passes without firing, so one failure causes one reset.
    ``signal_failures`` replaces detection with a direct notification when
    the scenario changes to a failure (test hook). With ``resets=False`` the
    loop is plain continual training: detections are still reported but
    never act.
    """

    def __init__(self, meta: MetaParams, topo: Topology, rng: np.random.Generator,
                 detector: FailureDetector = FailureDetector(), schedule: Optional[Schedule] = None,
                 load: Optional[float] = None, pg: Optional[tr.PGConfig] = None,
                 signal_failures: bool = False, resets: bool = True):
        self.meta = meta
        self.allow_resets = resets
        self.topo = topo
        self.rng = rng
        self.cfg = _pg_config(meta.hyper, pg)
        self.schedule = schedule or (lambda ep: NO_FAILURE)
        self.signal_failures = signal_failures
        load = meta.hyper.load if load is None else load
        self.net = Network(topo, NO_FAILURE, SimConfig(load, self.cfg.horizon, 0))
        self.policies = meta.copy_policies()
        self.monitor = LossMonitor(topo.n, detector)
        self.resets = 0

    def run(self, episodes: int) -> Iterator[EpisodeReport]:
        cfg, n = self.cfg, self.topo.n
        buffer: List[List[tr.RouterTrajectory]] = [[] for _ in range(n)]
        seeds: List[int] = []
        armed = True
        prev_scen = NO_FAILURE
        for ep in range(episodes):
            scen = self.schedule(ep)
            self.net.set_scenario(scen)
            if not seeds:
                seeds = tr.episode_seeds(self.rng, cfg.k)
            s = seeds.pop(0)
            self.monitor.clear()
            fired_at: List[int] = []

            def hook(t, rec):
                if self.monitor.push(rec.outcome.losses_per_router) and not fired_at:
                    fired_at.append(t)

            trajs, m = tr.run_episode(self.net, self.policies, np.random.default_rng(s ^ 0x5DEECE66D),
                                      s, cfg, step_hook=hook)
            if self.signal_failures:
                fired = scen != prev_scen and scen.failed_edge is not None
            else:
                fired = bool(fired_at)
            reset = fired and armed and self.allow_resets
            if reset:
                self.policies = self.meta.copy_policies()
                self.resets += 1
                buffer = [[] for _ in range(n)]
                seeds = []
                armed = False
            else:
                armed = armed or not fired
                for r, t in enumerate(trajs):
                    buffer[r].append(t)
                if len(buffer[0]) == cfg.k:
                    grads = tr.batch_gradients(self.policies, tr.Batch(buffer, []), cfg)
                    if cfg.alpha:
                        self.policies = [nn.apply_update(p, g, cfg.alpha)
                                         for p, g in zip(self.policies, grads)]
                    buffer = [[] for _ in range(n)]
            prev_scen = scen
            yield EpisodeReport(ep, scen, m.avg_delivery_time, m.lost, m.mean_reward, reset,
                                fired_at[0] if fired_at else None)


def online_adapt(meta: MetaParams, topo: Topology, episodes: int, rng: np.random.Generator,
                 **kw) -> Iterator[EpisodeReport]:
    """Stream per-episode reports of the live adaptation loop (see :class:`OnlineAdapter`)."""
    return OnlineAdapter(meta, topo, rng, **kw).run(episodes)


# ---------------------------------------------------------------------------
# persistence

def save_meta(meta: MetaParams, directory) -> Path:
    """One policy checkpoint per router plus a JSON manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for i, p in enumerate(meta.policies):
        name = f"router_{i:03d}.npz"
        nn.save_checkpoint(d / name, [p], {"router": i})
        files.append(name)
    manifest = {"format": 1, "hyper": asdict(meta.hyper), "seed": meta.seed, "routers": files,
                "extra": meta.extra}
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_meta(directory) -> MetaParams:
    d = Path(directory)
    try:
        manifest = json.loads((d / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{d}: unreadable meta manifest ({exc})") from exc
    policies = []
    for name in manifest["routers"]:
        [p], _ = nn.load_checkpoint(d / name)
        policies.append(p)
    return MetaParams(policies, MetaHyper(**manifest["hyper"]), manifest.get("seed"),
                      manifest.get("extra", {}))
