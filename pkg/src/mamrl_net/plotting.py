"""Static SVG charts from metrics CSVs.

Each algorithm is drawn as one line whose SVG group id is ``line-<algo>``,
so the files can be checked without rendering them.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import read_csv  # noqa: E402

log = logging.getLogger(__name__)

KINDS = {
    # kind: (x column, y column, x label, y label, file name)
    "sweep": ("load", "avg_delivery_time", "network load λ (packets/step)", "mean delivery time (steps)",
              "delivery_vs_load.svg"),
    "loss": ("episode", "packet_loss", "episode", "packet loss (packets/episode)", "loss_vs_episode.svg"),
    "delay": ("episode", "avg_delivery_time", "episode", "mean delivery time (steps)",
              "delivery_vs_episode.svg"),
    "reward": ("episode", "mean_reward", "episode", "mean episode return (per router)", "reward_vs_episode.svg"),
}

# fixed SVG hash salt keeps output byte-stable
matplotlib.rcParams["svg.hashsalt"] = "mamrl-net"
matplotlib.rcParams["svg.fonttype"] = "none"


def series(rows: Sequence[dict], kind: str) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Per-algo (x, y): y averaged over seeds (and episodes, for sweeps) at each x."""
    xcol, ycol = KINDS[kind][:2]
    acc: Dict[str, Dict[float, List[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r[ycol] is not None:
            acc[r["algo"]][r[xcol]].append(r[ycol])
    out = {}
    for algo in sorted(acc):
        xs = np.array(sorted(acc[algo]), dtype=float)
        out[algo] = (xs, np.array([np.mean(acc[algo][x]) for x in xs]))
    return out


def plot_kind(rows: Sequence[dict], kind: str, out_path) -> Path:
    if kind not in KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {', '.join(KINDS)}")
    _, _, xlabel, ylabel, _ = KINDS[kind]
    data = series(rows, kind)
    if not data:
        log.warning("no data rows for %s plot; writing an empty chart", kind)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for algo, (xs, ys) in data.items():
        (line,) = ax.plot(xs, ys, marker="o" if kind == "sweep" else None, ms=3, lw=1.2, label=algo)
        line.set_gid(f"line-{algo}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if data:
        ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path


def emit_plots(csv_paths: Iterable, out_dir, kinds: Sequence[str] = tuple(KINDS)) -> List[Path]:
    """One SVG per requested figure type, pooling the rows of all given CSVs."""
    rows: List[dict] = []
    for p in csv_paths:
        rows.extend(read_csv(p))
    out_dir = Path(out_dir)
    return [plot_kind(rows, k, out_dir / KINDS[k][4]) for k in kinds]
