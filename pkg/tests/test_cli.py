import csv
import json
import os
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marlcc import cli
from marlcc.cli import main
from marlcc.config import ExperimentConfig, smoke_config
from marlcc.env import make_world, run_episode, zero_policy


def write_cfg(tmp_path, horizon=20, episodes=4, seeds=(0,), **learner):
    cfg = smoke_config()
    cfg.scenario.horizon = horizon
    cfg.training.episodes = episodes
    cfg.training.eval_interval = 2
    cfg.learner.warmup = 16
    cfg.learner.batch_size = 8
    cfg.learner.hidden = (8, 8)
    for k, v in learner.items():
        setattr(cfg.learner, k, v)
    cfg.seeds = list(seeds)
    cfg.output_dir = str(tmp_path / "default_out")
    p = tmp_path / "cfg.json"
    p.write_text(cfg.to_json())
    return p, cfg


# -- train -----------------------------------------------------------------


def test_train_missing_config_exit_2(tmp_path, capsys):
    assert main(["train", str(tmp_path / "absent.json")]) == 2
    assert "absent.json" in capsys.readouterr().err


def test_train_bad_key_exit_2_names_key(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{\n  "training": {"episodez": 3}\n}\n')
    assert main(["train", str(p)]) == 2
    err = capsys.readouterr().err
    assert "training.episodez" in err and "line 2" in err


def test_train_smoke_50_episodes(tmp_path):
    p, _ = write_cfg(tmp_path, horizon=200, episodes=50)
    out = tmp_path / "run"
    assert main(["train", str(p), "--out", str(out)]) == 0
    s = json.loads((out / "seed_0" / "summary.json").read_text())
    assert len(s["episode_reward"]) == 50
    top = json.loads((out / "summary.json").read_text())
    assert len(top["runs"][0]["episode_reward"]) == 50
    with open(out / "seed_0" / "episodes.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["episode", "reward"] and len(rows) == 51
    assert (out / "seed_0" / "checkpoints" / "final" / "manifest.json").exists()


def test_train_twice_byte_identical(tmp_path):
    p, _ = write_cfg(tmp_path, episodes=6, seeds=(3,))
    for name in ("a", "b"):
        assert main(["train", str(p), "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "seed_3" / "episodes.csv").read_bytes()
    b = (tmp_path / "b" / "seed_3" / "episodes.csv").read_bytes()
    assert a == b
    ma = json.loads((tmp_path / "a" / "seed_3" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "seed_3" / "manifest.json").read_text())
    assert ma["config_hash"] == mb["config_hash"] and ma["seed"] == 3


def test_manifest_fields(tmp_path):
    p, cfg = write_cfg(tmp_path, episodes=1)
    out = tmp_path / "run"
    assert main(["train", str(p), "--out", str(out)]) == 0
    m = json.loads((out / "seed_0" / "manifest.json").read_text())
    assert m["config_hash"] == ExperimentConfig.load(p).digest()
    assert set(m) >= {"config_hash", "seed", "artifact_version", "timestamp"}


def test_seed_override_and_env_out(tmp_path, monkeypatch):
    p, _ = write_cfg(tmp_path, episodes=1)
    monkeypatch.setenv("MARLCC_OUT", str(tmp_path / "envout"))
    assert main(["train", str(p), "--seed", "7", "--seed", "8"]) == 0
    assert (tmp_path / "envout" / "seed_7" / "episodes.csv").exists()
    assert (tmp_path / "envout" / "seed_8" / "episodes.csv").exists()
    assert not (tmp_path / "default_out").exists()


def test_runtime_failure_exit_3(tmp_path, monkeypatch):
    p, _ = write_cfg(tmp_path, episodes=1)

    def boom(*a, **k):
        raise FloatingPointError("simulated failure")

    monkeypatch.setattr(cli, "run_training", boom)
    assert main(["train", str(p), "--out", str(tmp_path / "o")]) == 3


# -- evaluate --------------------------------------------------------------


@pytest.fixture
def fresh_checkpoint(tmp_path):
    p, _ = write_cfg(tmp_path, horizon=30, episodes=0)
    out = tmp_path / "run"
    assert main(["train", str(p), "--out", str(out)]) == 0
    return p, out / "seed_0" / "checkpoints" / "final"


def test_evaluate_zero_episodes(fresh_checkpoint, capsys):
    p, ck = fresh_checkpoint
    assert main(["evaluate", str(ck), "--config", str(p), "--episodes", "0"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["cumulative_reward"] == [] and rep["lambda2"] == []


def test_evaluate_fresh_checkpoint(fresh_checkpoint, tmp_path):
    p, ck = fresh_checkpoint
    out = tmp_path / "rep.json"
    assert main(["evaluate", str(ck), "--config", str(p), "--episodes", "2", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert len(rep["cumulative_reward"]) == 2
    assert all(np.isfinite(r) for r in rep["cumulative_reward"])
    assert len(rep["lambda2"]) == 2 and all(v is not None and v >= 0 for v in rep["lambda2"])


def test_evaluate_shape_mismatch_exit_2(fresh_checkpoint, tmp_path, capsys):
    _, ck = fresh_checkpoint
    other = tmp_path / "other"
    other.mkdir()
    p2, _ = write_cfg(other, hidden=(16, 16))
    assert main(["evaluate", str(ck), "--config", str(p2), "--episodes", "1"]) == 2
    err = capsys.readouterr().err
    assert "8, 8" in err and "16, 16" in err


def test_evaluate_missing_checkpoint_exit_2(tmp_path):
    p, _ = write_cfg(tmp_path)
    assert main(["evaluate", str(tmp_path / "none"), "--config", str(p)]) == 2


# -- ablate ----------------------------------------------------------------


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_ablate_full_only(tmp_path):
    p, _ = write_cfg(tmp_path, episodes=2)
    out = tmp_path / "abl"
    assert main(["ablate", str(p), "--variants", "full", "--out", str(out)]) == 0
    rows = read_rows(out / "ablation.csv")
    assert [r["variant"] for r in rows] == ["full"]
    assert json.loads((out / "ablation_tests.json").read_text())["full_vs"] == {}


def test_ablate_four_variants_two_seeds(tmp_path):
    p, _ = write_cfg(tmp_path, episodes=4, seeds=(0, 1))
    out = tmp_path / "abl"
    assert main(["ablate", str(p), "--out", str(out)]) == 0
    rows = read_rows(out / "ablation.csv")
    assert len(rows) == 8
    assert sorted({r["variant"] for r in rows}) == sorted(cli.ABLATION_VARIANTS)
    assert list(rows[0]) == list(cli.ABLATION_COLUMNS)
    tests = json.loads((out / "ablation_tests.json").read_text())["full_vs"]
    assert set(tests) == {"no_fl", "raw_obs", "uniform"}
    assert not any(t["defined"] for t in tests.values())  # two seeds are too few


def test_ablate_unknown_variant_exit_2(tmp_path):
    p, _ = write_cfg(tmp_path)
    assert main(["ablate", str(p), "--variants", "full,nope", "--out", str(tmp_path / "a")]) == 2


def test_ablation_variants_switch_one_component():
    cfg = smoke_config()
    assert cli.ablation_variant(cfg, "full") == cfg
    assert cli.ablation_variant(cfg, "no_fl").control.feedback_linearization is False
    assert cli.ablation_variant(cfg, "raw_obs").belief.mode == "raw"
    assert cli.ablation_variant(cfg, "uniform").credit.method == "uniform"
    assert cfg.credit.method == "exact"  # the original is untouched


def test_uniform_variant_logs_equal_split():
    v = cli.ablation_variant(smoke_config(), "uniform")
    v.scenario.horizon = 40
    world = make_world(v.env_config(), [5])
    lg = run_episode(world, zero_policy(), v.credit.method)[0]
    assert np.array_equal(lg.phi, np.repeat(lg.R[:, None] / 3, 3, axis=1))


# -- shapley ---------------------------------------------------------------


def game_file(tmp_path, obj):
    p = tmp_path / "game.json"
    p.write_text(json.dumps(obj))
    return str(p)


def test_shapley_two_player(tmp_path, capsys):
    g = game_file(tmp_path, {"n": 2, "values": {"0": 0, "1": 1, "2": 2, "3": 4}})
    assert main(["shapley", g]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["phi"] == [1.5, 2.5]
    assert out["method"] == "exact"
    assert set(out) == {"phi", "method", "standard_errors", "oracle_calls"}


def test_shapley_single_player(tmp_path, capsys):
    g = game_file(tmp_path, {"n": 1, "values": {"0": 0.5, "1": 3.0}})
    assert main(["shapley", g]) == 0
    assert json.loads(capsys.readouterr().out)["phi"] == [2.5]


def test_shapley_mc_zero_samples_exit_2(tmp_path):
    g = game_file(tmp_path, {"n": 2, "values": {"0": 0, "1": 1, "2": 2, "3": 4}})
    assert main(["shapley", g, "--method", "mc", "--samples", "0"]) == 2


def test_shapley_mc_runs(tmp_path, capsys):
    g = game_file(tmp_path, {"n": 2, "values": {"0": 0, "1": 1, "2": 2, "3": 4}})
    assert main(["shapley", g, "--method", "mc", "--samples", "50", "--seed", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["method"] == "monte-carlo(50)" and np.isclose(sum(out["phi"]), 4.0)


def test_shapley_incomplete_lists_missing(tmp_path, capsys):
    g = game_file(tmp_path, {"n": 3, "values": {"0": 0, "1": 1, "7": 5}})
    assert main(["shapley", g]) == 2
    err = capsys.readouterr().err
    for m in (2, 3, 4, 5, 6):
        assert re.search(rf"\b{m}\b", err)


# -- plot ------------------------------------------------------------------


def reward_csv(path, values):
    with open(path, "w") as fh:
        fh.write("episode,reward\n")
        for k, v in enumerate(values):
            fh.write(f"{k},{v}\n")
    return str(path)


def polylines(svg):
    return re.findall(r'<polyline[^>]*points="([^"]*)"', svg)


def test_plot_constant_single_horizontal_line(tmp_path):
    c = reward_csv(tmp_path / "a.csv", [5.0] * 30)
    out = tmp_path / "p.svg"
    assert main(["plot", c, "--out", str(out), "--window", "5"]) == 0
    lines = polylines(out.read_text())
    assert len(lines) == 1
    ys = {pt.split(",")[1] for pt in lines[0].split()}
    assert len(ys) == 1


def test_plot_two_inputs_two_lines_and_legend(tmp_path):
    a = reward_csv(tmp_path / "a.csv", np.arange(20.0))
    b = reward_csv(tmp_path / "b.csv", -np.arange(20.0))
    out = tmp_path / "p.svg"
    assert main(["plot", a, b, "--out", str(out)]) == 0
    svg = out.read_text()
    assert len(polylines(svg)) == 2
    assert svg.count('class="legend"') == 2
    assert "a.csv" in svg and "b.csv" in svg


def test_plot_deterministic(tmp_path):
    a = reward_csv(tmp_path / "a.csv", np.sin(np.arange(50.0)))
    for name in ("p1.svg", "p2.svg"):
        assert main(["plot", a, "--out", str(tmp_path / name), "--window", "3"]) == 0
    assert (tmp_path / "p1.svg").read_bytes() == (tmp_path / "p2.svg").read_bytes()


def test_plot_malformed_exit_2_names_file_and_row(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("episode,reward\n0,1.0\n1,oops\n")
    assert main(["plot", str(p), "--out", str(tmp_path / "x.svg")]) == 2
    err = capsys.readouterr().err
    assert "bad.csv" in err and "row 3" in err


def test_plot_missing_column_exit_2(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("episode,score\n0,1.0\n")
    assert main(["plot", str(p), "--out", str(tmp_path / "x.svg")]) == 2


def test_plot_accepts_training_log(tmp_path):
    p, _ = write_cfg(tmp_path, episodes=3)
    assert main(["train", str(p), "--out", str(tmp_path / "run")]) == 0
    csvp = str(tmp_path / "run" / "seed_0" / "episodes.csv")
    assert main(["plot", csvp, "--out", str(tmp_path / "r.svg")]) == 0
    assert main(["plot", csvp, "--column", "eval_reward", "--out", str(tmp_path / "e.svg")]) == 0


# -- report and exit codes ------------------------------------------------


def test_report_aggregates_run(tmp_path, capsys):
    p, _ = write_cfg(tmp_path, episodes=4, seeds=(0, 1))
    assert main(["train", str(p), "--out", str(tmp_path / "run")]) == 0
    capsys.readouterr()
    assert main(["report", str(tmp_path / "run")]) == 0
    agg = json.loads(capsys.readouterr().out)
    assert agg["seeds"] == [0, 1]
    assert len(agg["reports"]["0"]["cumulative_reward"]) == 4
    assert agg["wilcoxon_last_vs_first"]["defined"] is False


def test_report_empty_dir_exit_2(tmp_path):
    assert main(["report", str(tmp_path)]) == 2


def test_usage_errors_exit_2():
    assert main([]) == 2
    assert main(["fly"]) == 2
    assert main(["shapley"]) == 2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["train", "evaluate", "plot", "shapley", "report", "--out", "--seed", "x", "-1", "--method", "mc", "--bogus", "/nonexistent"]), max_size=5))
def test_exit_codes_only_0_2_3(argv):
    assert main(argv) in (0, 2, 3)
