import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from mamrl_net import experiments as ex
from mamrl_net.cli import main
from mamrl_net.plotting import emit_plots, plot_kind

TINY = dict(topology="b4", episodes=2, horizon=20, eval_episodes=5, k=2, meta_iters=1, meta_task_batch=1)


def _cfg(tmp_path, **kw):
    base = dict(TINY, out=str(tmp_path / "out"))
    base.update(kw)
    return ex.ExperimentConfig(**base)


def test_sweep_row_arithmetic_and_grid(tmp_path):
    cfg = _cfg(tmp_path, algos=("spa", "qroute"), loads=(0.1, 0.2, 0.35), seeds=(1,))
    rows = ex.read_csv(ex.run_load_sweep(cfg, plots=False))
    assert len(rows) == 2 * 3 * 1 * 5
    assert sorted({r["load"] for r in rows}) == [0.1, 0.2, 0.35]
    keys = [(r["algo"], r["load"], r["seed"], r["episode"]) for r in rows]
    assert keys == sorted(keys) and len(set(keys)) == len(keys)


def test_sweep_is_byte_reproducible(tmp_path):
    texts = []
    for i in range(2):
        cfg = _cfg(tmp_path / str(i), algos=("spa", "qroute", "pg", "mamrl"), loads=(0.2,), seeds=(3,))
        texts.append(ex.run_load_sweep(cfg).read_bytes())
    assert texts[0] == texts[1]


def test_csv_header_and_blank_delivery(tmp_path):
    cfg = _cfg(tmp_path, algos=("spa",), loads=(0.0,), seeds=(1,))
    path = ex.run_load_sweep(cfg, plots=False)
    lines = path.read_text().splitlines()
    assert lines[0] == "seed,algo,load,episode,scenario,avg_delivery_time,packet_loss,mean_reward,adapted"
    assert all(line.split(",")[5] == "" for line in lines[1:])


def test_delivery_time_at_least_one(tmp_path):
    cfg = _cfg(tmp_path, algos=("spa", "pg"), loads=(0.3,), seeds=(2,))
    rows = ex.read_csv(ex.run_load_sweep(cfg, plots=False))
    assert all(r["avg_delivery_time"] is None or r["avg_delivery_time"] >= 1 for r in rows)


def test_spa_rows_have_no_learning(tmp_path):
    cfg = _cfg(tmp_path, algos=("spa",), loads=(0.2,), seeds=(1, 2), episodes=5)
    a = ex.read_csv(ex.run_load_sweep(cfg, plots=False))
    b = ex.read_csv(ex.run_load_sweep(ex.ExperimentConfig(**{**cfg.__dict__, "episodes": 0}), plots=False))
    assert a == b


def test_eval_seeds_shared_across_algos(tmp_path):
    cfg = _cfg(tmp_path, algos=("spa", "qroute"), loads=(0.0001,), seeds=(1,))
    rows = ex.read_csv(ex.run_load_sweep(cfg, plots=False))
    assert ex.eval_seed(1, 0.2, 0) == ex.eval_seed(1, 0.2, 0) != ex.eval_seed(1, 0.2, 1)
    assert len(rows) == 10


def test_unknown_algorithm_and_empty_grid(tmp_path):
    with pytest.raises(ex.ConfigError):
        ex.run_load_sweep(_cfg(tmp_path, algos=("dijkstra",)))
    with pytest.raises(ex.ConfigError):
        ex.run_load_sweep(_cfg(tmp_path, loads=()))
    with pytest.raises(ex.ConfigError):
        ex.run_load_sweep(_cfg(tmp_path, horizon=0))
    with pytest.raises(ex.ConfigError):
        ex.run_failure_experiment(_cfg(tmp_path))


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        ex.run_load_sweep(_cfg(tmp_path, out=str(blocker / "sub"), algos=("spa",), loads=(0.1,), seeds=(1,)))


def test_episodes_to_adapt():
    # flat at 0 before the failure, drops to -10, recovers linearly to -2 plateau
    r = [0.0] * 10 + list(np.linspace(-10, -2, 9)) + [-2.0] * 120
    # threshold -2.1: first window ending at post index j with trailing mean >= -2.1
    post = np.array(r[10:])
    trail = [post[j - 4:j + 1].mean() for j in range(4, len(post))]
    expect = next(j for j, v in zip(range(4, len(post)), trail) if v >= -2.1) + 1
    assert ex.episodes_to_adapt(r, 10) == expect
    # instant recovery counts the full trailing window
    assert ex.episodes_to_adapt([1.0] * 200, 50) == 5
    assert ex.episodes_to_adapt([1.0, 1.0], 1) is None


def test_failure_experiment(tmp_path):
    cfg = _cfg(tmp_path, algos=("spa", "qroute", "mamrl", "random-init"), loads=(0.3,), seeds=(1,),
               episodes=8, horizon=100, failures={3: (5, 7)})
    path, summary = ex.run_failure_experiment(cfg)
    rows = ex.read_csv(path)
    assert len(rows) == 4 * 8
    spa = [r for r in rows if r["algo"] == "spa"]
    assert [r["scenario"] for r in spa] == ["intact"] * 3 + ["5-7"] * 5
    assert all(r["packet_loss"] > 0 for r in spa[3:])
    assert not any(r["adapted"] for r in rows if r["algo"] != "mamrl")
    assert set(summary["algos"]) == {"spa", "qroute", "mamrl", "random-init"}
    saved = json.loads((tmp_path / "out" / "adaptation.json").read_text())
    assert saved == json.loads(json.dumps(summary))
    for name in ("loss_vs_episode.svg", "delivery_vs_episode.svg", "reward_vs_episode.svg"):
        assert (tmp_path / "out" / name).exists()


def test_failure_rejects_bad_edge(tmp_path):
    with pytest.raises(ex.ConfigError):
        ex.run_failure_experiment(_cfg(tmp_path, algos=("spa",), failures={1: (0, 11)}))


def test_no_failure_schedule_never_adapts(tmp_path):
    cfg = _cfg(tmp_path, algos=("mamrl",), loads=(0.1,), seeds=(1,), episodes=4)
    topo = cfg.topo()
    rows = ex.failure_cell(cfg, topo, "mamrl", 1, lambda ep: ex.NO_FAILURE)
    assert not any(r.adapted for r in rows)


def test_meta_cache_round_trip(tmp_path):
    cfg = _cfg(tmp_path, meta_dir=str(tmp_path / "meta"))
    topo = cfg.topo()
    a = ex._MetaCache(cfg, topo).get(4)
    b = ex._MetaCache(cfg, topo).get(4)  # loaded from disk
    assert all(x == y for x, y in zip(a.policies, b.policies))
    with pytest.raises(ex.ConfigError):
        ex._MetaCache(ex.ExperimentConfig(**{**cfg.__dict__, "alpha": 0.5}), topo).get(4)


# ---------------------------------------------------------------------------
# plots

def _lines(svg_path):
    root = ET.parse(svg_path).getroot()
    return {g.get("id"): g for g in root.iter("{http://www.w3.org/2000/svg}g")
            if (g.get("id") or "").startswith("line-")}


def test_sweep_svg_has_one_line_per_algo(tmp_path):
    cfg = _cfg(tmp_path, algos=("spa", "qroute", "pg"), loads=(0.1, 0.3), seeds=(1,))
    ex.run_load_sweep(cfg)
    lines = _lines(tmp_path / "out" / "delivery_vs_load.svg")
    assert set(lines) == {"line-spa", "line-qroute", "line-pg"}


def test_svg_coordinates_follow_data(tmp_path):
    rows = [dict(seed=1, algo="spa", load=l, episode=0, scenario="intact", avg_delivery_time=d,
                 packet_loss=0, mean_reward=0.0, adapted=False)
            for l, d in [(0.1, 2.0), (0.2, 5.0), (0.3, 3.0)]]
    out = plot_kind(rows, "sweep", tmp_path / "s.svg")
    path = _lines(out)["line-spa"].find("{http://www.w3.org/2000/svg}path")
    pts = [tuple(map(float, tok.split())) for tok in
           path.get("d").replace("M", "|").replace("L", "|").split("|") if tok.strip()]
    xs, ys = zip(*pts)
    assert xs[0] < xs[1] < xs[2]
    # SVG y grows downward: the largest value has the smallest y
    assert ys[1] < ys[2] < ys[0]


def test_header_only_csv_gives_empty_plot(tmp_path, caplog):
    csv_path = tmp_path / "empty.csv"
    csv_path.write_text(",".join(ex.CSV_HEADER) + "\n")
    with caplog.at_level("WARNING"):
        [svg] = emit_plots([csv_path], tmp_path, kinds=("sweep",))
    assert svg.exists() and not _lines(svg)
    assert "no data" in caplog.text


def test_malformed_csv_names_row(tmp_path):
    csv_path = tmp_path / "bad.csv"
    csv_path.write_text(",".join(ex.CSV_HEADER) + "\n1,spa,0.1,0,intact,2.0,0,0.0,0\n1,spa,oops\n")
    with pytest.raises(ValueError, match="line 3"):
        ex.read_csv(csv_path)


# ---------------------------------------------------------------------------
# command line

def test_cli_sweep_and_plot(tmp_path, capsys):
    out = tmp_path / "cli"
    code = main(["sweep", "--topology", "b4", "--algos", "spa,qroute", "--loads", "0.1,0.2",
                 "--episodes", "1", "--horizon", "10", "--seeds", "1", "--out", str(out),
                 "--eval-episodes", "2"])
    assert code == 0
    assert len(ex.read_csv(out / "sweep.csv")) == 8
    assert (out / "delivery_vs_load.svg").exists()
    assert main(["plot", "--in", str(out / "sweep.csv"), "--kind", "reward", "--out",
                 str(tmp_path / "r.svg")]) == 0
    assert set(_lines(tmp_path / "r.svg")) == {"line-spa", "line-qroute"}


def test_cli_failure(tmp_path):
    code = main(["failure", "--topology", "b4", "--algos", "spa", "--load", "0.3", "--fail-at", "2:4-5",
                 "--episodes", "4", "--horizon", "20", "--seeds", "1", "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "adaptation.json").exists()


def test_cli_meta_train(tmp_path):
    code = main(["meta-train", "--topology", "b4", "--alpha", "0.01", "--k", "1", "--task-batch", "1",
                 "--iters", "1", "--horizon", "10", "--seed", "1", "--out", str(tmp_path / "ck")])
    assert code == 0
    assert (tmp_path / "ck" / "manifest.json").exists()


def test_cli_exit_codes(tmp_path):
    base = ["sweep", "--episodes", "1", "--horizon", "5", "--seeds", "1", "--loads", "0.1"]
    assert main(base + ["--algos", "bogus", "--out", str(tmp_path)]) == 2
    assert main(base + ["--algos", "spa", "--topology", str(tmp_path / "missing.json"),
                        "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["failure", "--fail-at", "nonsense", "--out", str(tmp_path)])
    assert exc.value.code == 2
    blocker = tmp_path / "f"
    blocker.write_text("")
    assert main(base + ["--algos", "spa", "--out", str(blocker / "x")]) == 3
    assert main(["plot", "--in", str(tmp_path / "none.csv"), "--kind", "loss", "--out",
                 str(tmp_path / "p.svg")]) == 3
