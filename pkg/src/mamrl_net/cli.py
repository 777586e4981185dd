"""``mamrl-net`` command line: sweep, failure, meta-train, plot.

Exit codes: 0 success, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional, Sequence

import numpy as np

from . import experiments as ex
from . import meta as mm
from .plotting import KINDS, plot_kind
from .topology import TaskDistribution, TopologyError

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3
log = logging.getLogger("mamrl_net")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage already; keep that but route through one place
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _fail_at(text: str):
    """``<episode>:<u>-<v>``"""
    try:
        ep, edge = text.split(":")
        u, v = edge.split("-")
        return int(ep), (int(u), int(v))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected <episode>:<u>-<v>, got {text!r}") from None


def _common(p: argparse.ArgumentParser, episodes_default: int = 2000) -> None:
    p.add_argument("--topology", default="b4", help="topology JSON file or bundled name (b4, geant, att)")
    p.add_argument("--episodes", type=int, default=episodes_default, help="training episodes per run")
    p.add_argument("--horizon", type=int, default=500)
    p.add_argument("--seeds", type=_ints, default=[1, 2, 3])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--eval-episodes", type=int, default=20)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--meta-iters", type=int, default=50, help="meta-iterations for the mamrl initialization")
    p.add_argument("--meta-load", type=float, default=0.05)
    p.add_argument("--meta-dir", default=None, help="cache directory for meta-initializations")
    p.add_argument("--no-plots", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mamrl-net", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("sweep", help="delivery time versus load")
    _common(p)
    p.add_argument("--algos", type=_names, default=["spa", "qroute", "pg", "mamrl"])
    p.add_argument("--loads", type=_floats, default=[0.005, 0.1, 0.2, 0.3, 0.4, 0.5])

    p = sub.add_parser("failure", help="scripted link failures and adaptation speed")
    _common(p)
    p.add_argument("--algos", type=_names, default=["spa", "qroute", "mamrl", "random-init"])
    p.add_argument("--load", type=float, default=0.3)
    p.add_argument("--fail-at", type=_fail_at, action="append", required=True,
                   help="<episode>:<u>-<v>; repeatable")

    p = sub.add_parser("meta-train", help="train and save a meta-initialization")
    p.add_argument("--topology", default="b4")
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--task-batch", type=int, default=5)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--horizon", type=int, default=500)
    p.add_argument("--load", type=float, default=0.05, help="traffic load of the meta-training tasks")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="checkpoint directory")

    p = sub.add_parser("plot", help="render an SVG chart from a metrics CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--kind", choices=list(KINDS), required=True)
    p.add_argument("--out", required=True)
    return parser


def _config(a) -> ex.ExperimentConfig:
    return ex.ExperimentConfig(
        topology=a.topology, algos=tuple(a.algos), episodes=a.episodes, horizon=a.horizon,
        seeds=tuple(a.seeds), out=a.out, eval_episodes=a.eval_episodes, alpha=a.alpha, k=a.k,
        meta_iters=a.meta_iters, meta_load=a.meta_load, meta_dir=a.meta_dir,
        loads=tuple(a.loads) if a.cmd == "sweep" else (a.load,),
        failures=dict(a.fail_at) if a.cmd == "failure" else {},
    )


def _run(a) -> int:
    if a.cmd == "sweep":
        path = ex.run_load_sweep(_config(a), plots=not a.no_plots)
        print(path)
    elif a.cmd == "failure":
        path, summary = ex.run_failure_experiment(_config(a), plots=not a.no_plots)
        print(path)
        print(json.dumps(summary["algos"], sort_keys=True))
    elif a.cmd == "meta-train":
        topo = ex.ExperimentConfig(topology=a.topology).topo()
        hyper = mm.MetaHyper(alpha=a.alpha, k=a.k, horizon=a.horizon, task_batch=a.task_batch,
                             iters=a.iters, load=a.load)
        meta = mm.maml_train(TaskDistribution.uniform(topo), hyper, np.random.default_rng(a.seed), seed=a.seed,
                             progress=lambda i, s: log.info("meta-iteration %d %s", i, s))
        print(mm.save_meta(meta, a.out))
    elif a.cmd == "plot":
        print(plot_kind(ex.read_csv(a.inp), a.kind, a.out))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ex.ConfigError, TopologyError) as exc:
        print(f"mamrl-net: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"mamrl-net: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # malformed inputs (CSV rows, manifests, hyperparameters)
        print(f"mamrl-net: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
