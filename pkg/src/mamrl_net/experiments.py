"""Experiment harness: load sweeps and scripted link-failure runs.

Every run writes one CSV (fixed header, rows sorted by algo, load, seed,
episode) and is byte-reproducible for a given configuration.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import meta as mm
from . import training as tr
from .baselines import QRoutingController, SpaController
from .simulator import Network, SimConfig
from .topology import (NO_FAILURE, FailureScenario, TaskDistribution, Topology, TopologyError,
                       load_topology)

log = logging.getLogger(__name__)

CSV_HEADER = ("seed", "algo", "load", "episode", "scenario", "avg_delivery_time",
              "packet_loss", "mean_reward", "adapted")
ALGOS = ("spa", "qroute", "pg", "mamrl", "random-init")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    topology: str = "b4"
    algos: Tuple[str, ...] = ("spa", "qroute", "pg", "mamrl")
    loads: Tuple[float, ...] = (0.005, 0.1, 0.2, 0.3, 0.4, 0.5)
    episodes: int = 2000
    horizon: int = 500
    seeds: Tuple[int, ...] = (1, 2, 3)
    failures: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    out: str = "results"
    eval_episodes: int = 20
    alpha: float = 0.01
    k: int = 10
    # meta-initialization used by "mamrl"
    meta_iters: int = 50
    meta_task_batch: int = 5
    meta_load: float = 0.05
    meta_dir: Optional[str] = None
    # Q-routing
    q_eta: float = 0.7
    q_epsilon: float = 0.05
    detector_window: int = 50
    detector_threshold: float = 5

    def validate(self) -> None:
        if not self.loads:
            raise ConfigError("load grid is empty")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.episodes < 0 or self.eval_episodes < 0:
            raise ConfigError("episode counts must be nonnegative")
        bad = [a for a in self.algos if a not in ALGOS]
        if bad or not self.algos:
            raise ConfigError(f"unknown algorithm(s) {bad}; choose from {', '.join(ALGOS)}")
        if any(l < 0 for l in self.loads):
            raise ConfigError("loads must be nonnegative")

    def pg_config(self) -> tr.PGConfig:
        return tr.PGConfig(alpha=self.alpha, k=self.k, horizon=self.horizon)

    def topo(self) -> Topology:
        try:
            return load_topology(self.topology)
        except FileNotFoundError as exc:
            raise ConfigError(f"topology not found: {self.topology}") from exc
        except TopologyError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class MetricsRow:
    seed: int
    algo: str
    load: float
    episode: int
    scenario: str
    avg_delivery_time: Optional[float]
    packet_loss: int
    mean_reward: float
    adapted: bool = False

    def sort_key(self):
        return (self.algo, self.load, self.seed, self.episode)

    def cells(self) -> List[str]:
        adt = "" if self.avg_delivery_time is None else f"{self.avg_delivery_time:.6f}"
        return [str(self.seed), self.algo, format(self.load, "g"), str(self.episode), self.scenario,
                adt, str(self.packet_loss), f"{self.mean_reward:.6f}", "1" if self.adapted else "0"]


def scenario_id(s: FailureScenario) -> str:
    return "intact" if s.failed_edge is None else f"{s.failed_edge[0]}-{s.failed_edge[1]}"


def write_csv(rows: Iterable[MetricsRow], path) -> Path:
    rows = sorted(rows, key=MetricsRow.sort_key)
    keys = [r.sort_key() for r in rows]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate (algo, load, seed, episode) rows")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.cells())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> List[dict]:
    """Parse a metrics CSV; raises ValueError naming the offending line."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected header") from None
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: line 1: unexpected header {header}")
        out = []
        for lineno, cells in enumerate(reader, start=2):
            if len(cells) != len(CSV_HEADER):
                raise ValueError(f"{path}: line {lineno}: expected {len(CSV_HEADER)} fields, got {len(cells)}")
            try:
                out.append({
                    "seed": int(cells[0]), "algo": cells[1], "load": float(cells[2]),
                    "episode": int(cells[3]), "scenario": cells[4],
                    "avg_delivery_time": float(cells[5]) if cells[5] else None,
                    "packet_loss": int(cells[6]), "mean_reward": float(cells[7]),
                    "adapted": cells[8] == "1",
                })
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# episode runners

def run_controller_episode(net: Network, controller, seed: int, cfg: tr.PGConfig,
                           episode: int = 0) -> tr.EpisodeMetrics:
    """One episode driven by a table controller (SPA or Q-routing), scored like the learners."""
    net.reset(seed)
    controller.on_episode_start(episode, net)
    delivered = lost = 0
    delay = greward = 0.0
    steps = cfg.horizon + 1
    for t in range(steps):
        net.inject()
        actions = controller.act(net)
        out = net.step(actions)
        controller.observe_outcome(net, actions, out)
        r_loss, r_delay = tr.step_rewards(net, out, cfg, t == steps - 1)
        delivered += len(out.delivered)
        delay += sum(dt for _, dt in out.delivered)
        lost += out.n_lost
        greward += float(r_loss.mean() + r_delay.mean())
    return tr.EpisodeMetrics(delivered, lost, delay, greward, net.state.injected)


def eval_seed(seed: int, load: float, episode: int) -> int:
    """Traffic seed for an evaluation episode; identical across algorithms."""
    return int(np.random.SeedSequence([seed, int(round(load * 1e6)), episode, 0xE5]).generate_state(1)[0])


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


ALGO_TAG = {a: i for i, a in enumerate(ALGOS)}


class _MetaCache:
    """One meta-initialization per seed, trained on the uniform failure distribution."""

    def __init__(self, cfg: ExperimentConfig, topo: Topology):
        self.cfg, self.topo = cfg, topo
        self._cache: Dict[int, mm.MetaParams] = {}

    def get(self, seed: int) -> mm.MetaParams:
        if seed in self._cache:
            return self._cache[seed]
        c = self.cfg
        hyper = mm.MetaHyper(alpha=c.alpha, k=c.k, horizon=c.horizon, task_batch=c.meta_task_batch,
                             iters=c.meta_iters, load=c.meta_load)
        path = Path(c.meta_dir) / f"seed_{seed}" if c.meta_dir else None
        if path is not None and (path / mm.MANIFEST).exists():
            meta = mm.load_meta(path)
            if meta.hyper != hyper or meta.seed != seed:
                raise ConfigError(f"{path}: cached meta-initialization was trained with other settings")
        else:
            log.info("meta-training seed %d (%d iterations)", seed, c.meta_iters)
            meta = mm.maml_train(TaskDistribution.uniform(self.topo), hyper, _rng(seed, 0x3E7A),
                                 pg=c.pg_config(), seed=seed)
            if path is not None:
                mm.save_meta(meta, path)
        self._cache[seed] = meta
        return meta


def _random_meta(cfg: ExperimentConfig, topo: Topology, seed: int) -> mm.MetaParams:
    hyper = mm.MetaHyper(alpha=cfg.alpha, k=cfg.k, horizon=cfg.horizon, task_batch=1, iters=0)
    return mm.MetaParams(tr.init_policies(topo.n, _rng(seed, 0x1417)), hyper, seed)


def _qroute(cfg: ExperimentConfig, topo: Topology, seed: int) -> QRoutingController:
    return QRoutingController(topo, eta=cfg.q_eta, epsilon=cfg.q_epsilon, seed=seed)


def _train_policies(algo: str, cfg: ExperimentConfig, topo: Topology, seed: int, load: float,
                    metas: _MetaCache):
    """Online training for ``cfg.episodes`` rollouts; returns the final policies."""
    init = metas.get(seed) if algo == "mamrl" else _random_meta(cfg, topo, seed)
    adapter = mm.OnlineAdapter(init, topo, _rng(seed, ALGO_TAG[algo], int(round(load * 1e6))),
                               detector=mm.FailureDetector(cfg.detector_window, cfg.detector_threshold),
                               load=load, pg=cfg.pg_config(), resets=False)
    for _ in adapter.run(cfg.episodes):
        pass
    return adapter.policies


def sweep_cell(cfg: ExperimentConfig, topo: Topology, algo: str, load: float, seed: int,
               metas: Optional[_MetaCache] = None) -> List[MetricsRow]:
    """Train (if the algorithm learns) then evaluate; one row per evaluation episode."""
    metas = metas or _MetaCache(cfg, topo)
    pg = cfg.pg_config()
    net = Network(topo, NO_FAILURE, SimConfig(load, cfg.horizon, 0))
    rows = []
    if algo in ("spa", "qroute"):
        ctl = SpaController(topo) if algo == "spa" else _qroute(cfg, topo, seed)
        if algo == "qroute":
            for ep in range(cfg.episodes):
                run_controller_episode(net, ctl, int(_rng(seed, 0x9, ep).integers(2**62)), pg, ep)
            ctl.learning = False
        for ep in range(cfg.eval_episodes):
            m = run_controller_episode(net, ctl, eval_seed(seed, load, ep), pg, ep)
            rows.append(MetricsRow(seed, algo, load, ep, "intact", m.avg_delivery_time, m.lost, m.mean_reward))
    else:
        pols = _train_policies(algo, cfg, topo, seed, load, metas)
        for ep in range(cfg.eval_episodes):
            s = eval_seed(seed, load, ep)
            _, m = tr.run_episode(net, pols, np.random.default_rng(s ^ 0x5DEECE66D), s, pg, record=False)
            rows.append(MetricsRow(seed, algo, load, ep, "intact", m.avg_delivery_time, m.lost, m.mean_reward))
    return rows


def run_load_sweep(cfg: ExperimentConfig, csv_name: str = "sweep.csv", plots: bool = True) -> Path:
    cfg.validate()
    topo = cfg.topo()
    out = _out_dir(cfg.out)
    metas = _MetaCache(cfg, topo)
    rows: List[MetricsRow] = []
    for algo in cfg.algos:
        for load in cfg.loads:
            for seed in cfg.seeds:
                log.info("sweep %s load=%g seed=%d", algo, load, seed)
                rows.extend(sweep_cell(cfg, topo, algo, load, seed, metas))
    path = write_csv(rows, out / csv_name)
    if plots:
        from .plotting import emit_plots
        emit_plots([path], out, kinds=("sweep",))
    return path


# ---------------------------------------------------------------------------
# failure runs

def episodes_to_adapt(rewards: Sequence[float], fail_at: int, window: int = 5, frac: float = 0.95,
                      plateau_len: int = 100) -> Optional[int]:
    """Episodes after ``fail_at`` until the trailing mean reward reaches ``frac`` of the plateau.

    The plateau is the mean of the final ``plateau_len`` episodes. For negative
    rewards "95% of the plateau" means within 5% of it: r >= p - 0.05 |p|.
    Counting includes the failure episode, so the earliest possible answer is
    ``window``. Returns None if the threshold is never met.
    """
    post = np.asarray(rewards[fail_at:], dtype=float)
    if len(post) < window:
        return None
    plateau = float(post[-plateau_len:].mean())
    thr = plateau - (1 - frac) * abs(plateau)
    trail = np.convolve(post, np.ones(window) / window, mode="valid")
    hit = np.flatnonzero(trail >= thr - 1e-12)
    return int(hit[0]) + window if len(hit) else None


def failure_cell(cfg: ExperimentConfig, topo: Topology, algo: str, seed: int,
                 schedule: mm.Schedule, metas: Optional[_MetaCache] = None) -> List[MetricsRow]:
    load = cfg.loads[0]
    metas = metas or _MetaCache(cfg, topo)
    pg = cfg.pg_config()
    rows = []
    if algo in ("spa", "qroute"):
        net = Network(topo, NO_FAILURE, SimConfig(load, cfg.horizon, 0))
        ctl = SpaController(topo) if algo == "spa" else _qroute(cfg, topo, seed)
        rng = _rng(seed, ALGO_TAG[algo], 0xFA11)
        for ep in range(cfg.episodes):
            scen = schedule(ep)
            net.set_scenario(scen)
            m = run_controller_episode(net, ctl, int(rng.integers(2**62)), pg, ep)
            rows.append(MetricsRow(seed, algo, load, ep, scenario_id(scen), m.avg_delivery_time,
                                   m.lost, m.mean_reward))
        return rows
    if algo == "pg":
        raise ConfigError("failure runs use 'random-init' for policy gradient from scratch")
    init = metas.get(seed) if algo == "mamrl" else _random_meta(cfg, topo, seed)
    adapter = mm.OnlineAdapter(init, topo, _rng(seed, ALGO_TAG[algo], 0xFA11),
                               detector=mm.FailureDetector(cfg.detector_window, cfg.detector_threshold),
                               schedule=schedule, load=load, pg=pg, resets=algo == "mamrl")
    for rep in adapter.run(cfg.episodes):
        rows.append(MetricsRow(seed, algo, load, rep.episode, scenario_id(rep.scenario),
                               rep.avg_delivery_time, rep.packet_loss, rep.mean_reward, rep.adapted))
    return rows


def adaptation_summary(rows: Sequence[MetricsRow], fail_at: int) -> dict:
    by: Dict[str, Dict[int, List[MetricsRow]]] = {}
    for r in rows:
        by.setdefault(r.algo, {}).setdefault(r.seed, []).append(r)
    out = {"fail_at": fail_at, "algos": {}}
    for algo, seeds in sorted(by.items()):
        per = {}
        for seed, rs in sorted(seeds.items()):
            rs = sorted(rs, key=lambda r: r.episode)
            per[str(seed)] = episodes_to_adapt([r.mean_reward for r in rs], fail_at)
        vals = [v for v in per.values() if v is not None]
        out["algos"][algo] = {"per_seed": per, "median": float(np.median(vals)) if vals else None}
    return out


def run_failure_experiment(cfg: ExperimentConfig, csv_name: str = "failure.csv",
                           plots: bool = True) -> Tuple[Path, dict]:
    cfg.validate()
    if not cfg.failures:
        raise ConfigError("failure schedule is empty")
    topo = cfg.topo()
    events = {}
    for ep, (u, v) in cfg.failures.items():
        try:
            events[int(ep)] = FailureScenario.failing(topo, u, v)
        except TopologyError as exc:
            raise ConfigError(str(exc)) from exc
    schedule = mm.failure_schedule(events)
    out = _out_dir(cfg.out)
    metas = _MetaCache(cfg, topo)
    rows: List[MetricsRow] = []
    for algo in cfg.algos:
        for seed in cfg.seeds:
            log.info("failure run %s seed=%d", algo, seed)
            rows.extend(failure_cell(cfg, topo, algo, seed, schedule, metas))
    path = write_csv(rows, out / csv_name)
    summary = adaptation_summary(rows, min(events))
    (out / "adaptation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if plots:
        from .plotting import emit_plots
        emit_plots([path], out, kinds=("loss", "delay", "reward"))
    return path, summary


def _out_dir(p) -> Path:
    out = Path(p)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out
