"""Command-line entry point: ``marlcc {train|evaluate|ablate|shapley|plot|report}``.

Exit codes are 0 on success, 2 on usage or configuration errors and 3 on
runtime failures.  ``MARLCC_OUT`` overrides the configured output directory;
an explicit ``--out`` wins over both.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import glob
import json
import logging
import math
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .credit import game_from_json, shapley_exact, shapley_mc
from .env import (
    ACTION_DIM,
    FEATURE_DIM,
    closed_loop_stability,
    eval_seed,
    make_world,
    run_episode,
    run_training,
    write_record,
)
from .errors import CheckpointError, ConfigError, GameSizeError, MarlccError
from .learner import MultiAgentLearner
from .metrics import build_report, convergence_speed, moving_average, platoon_reference, wilcoxon_signed_rank

log = logging.getLogger("marlcc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
ABLATION_VARIANTS = ("full", "no_fl", "raw_obs", "uniform")
ABLATION_COLUMNS = ("variant", "seed", "final_mean_reward", "convergence_episode")
WINDOW = 100


class UsageError(MarlccError):
    """Bad command-line input."""


# ---------------------------------------------------------------------------
# helpers


def _out_dir(flag: Optional[str], cfg: ExperimentConfig) -> str:
    if flag:
        return flag
    return os.environ.get("MARLCC_OUT") or cfg.output_dir


def _manifest(cfg: ExperimentConfig, seed: int, **extra) -> dict:
    d = {
        "config_hash": cfg.digest(),
        "seed": int(seed),
        "artifact_version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    d.update(extra)
    return d


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _finite(x):
    return None if x is None or not math.isfinite(x) else float(x)


def _window_means(rec, window: int = WINDOW):
    w = min(window, rec.episodes)
    if w == 0:
        return float("nan"), float("nan")
    return rec.window_eval_mean(True, w), rec.window_eval_mean(False, w)


def _train_into(cfg: ExperimentConfig, seeds: Sequence[int], out: str, tag: dict = None):
    """Train all seeds in lockstep and write each seed's logs and manifest."""
    os.makedirs(out, exist_ok=True)
    env_cfg = cfg.env_config()
    every = max(1, cfg.training.episodes // 20)

    def progress(e, recs):
        if (e + 1) % every == 0:
            log.info("episode %d/%d  mean reward %.1f", e + 1, cfg.training.episodes, np.mean([r.episode_reward[-1] for r in recs]))

    records, _ = run_training(env_cfg, cfg.learner, cfg.training_config(), seeds, out_dir=out, progress=progress)
    for rec in records:
        d = os.path.join(out, f"seed_{rec.seed}")
        write_record(rec, d)
        _write_json(os.path.join(d, "manifest.json"), _manifest(cfg, rec.seed, **(tag or {})))
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    return records


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.episodes is not None:
        cfg.training.episodes = args.episodes
    seeds = args.seed if args.seed else cfg.seeds
    out = _out_dir(args.out, cfg)
    records = _train_into(cfg, seeds, out)
    runs = []
    for rec in records:
        first, last = _window_means(rec)
        runs.append(
            {
                "seed": rec.seed,
                "episodes": rec.episodes,
                "episode_reward": [float(r) for r in rec.episode_reward],
                "first_window_eval": _finite(first),
                "last_window_eval": _finite(last),
                "collisions": int(np.sum(rec.episode_collisions)),
            }
        )
    _write_json(os.path.join(out, "summary.json"), {"config_hash": cfg.digest(), "seeds": list(map(int, seeds)), "runs": runs})
    print(os.path.join(out, "summary.json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _load_learner(cfg: ExperimentConfig, checkpoint: str) -> MultiAgentLearner:
    sc = cfg.scenario
    learner = MultiAgentLearner(sc.n_agents, FEATURE_DIM, ACTION_DIM, cfg.learner, [np.random.default_rng(0)], sc.dt)
    learner.load(checkpoint)
    return learner


def evaluation_report(cfg: ExperimentConfig, learner, episodes: int, seed: int):
    """Deterministic episodes on the evaluation streams of ``seed, seed+1, ...``."""
    env_cfg = cfg.env_config(track_connectivity=True)
    rewards, lam, phis, Rs, pos, ref = [], [], [], [], [], []
    delivered = 0
    for k in range(episodes):
        world = make_world(env_cfg, [eval_seed(seed + k)])
        lg = run_episode(
            world, learner, cfg.credit.method, deterministic=True, mc_samples=cfg.credit.samples, record=True
        )[0]
        rewards.append(lg.cumulative_reward)
        lam.append(float(np.mean(lg.lambda2)) if lg.lambda2 is not None and lg.length else float("nan"))
        phis.append(lg.phi)
        Rs.append(lg.R)
        pos.append(lg.positions)
        ref.append(platoon_reference(lg.positions, world.layout, cfg.scenario.reward.headway))
        delivered += int(np.sum(lg.msgs_sent) - np.sum(lg.msgs_dropped))
    if not episodes:
        return build_report([])
    ent = float(learner.entropy()[0])
    stab = closed_loop_stability(env_cfg, learner, eval_seed(seed))
    return build_report(
        rewards,
        entropy=[ent] * episodes,
        phi=np.concatenate(phis),
        R=np.concatenate(Rs),
        lambda2=lam,
        positions=np.concatenate(pos),
        reference=np.concatenate(ref),
        messages_delivered=delivered,
        stability=stab,
    )


def cmd_evaluate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.episodes < 0:
        raise UsageError("--episodes must be nonnegative")
    learner = _load_learner(cfg, args.checkpoint)
    rep = evaluation_report(cfg, learner, args.episodes, args.seed)
    text = rep.to_json() + "\n"
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def ablation_variant(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    """A copy of ``cfg`` with one component switched off."""
    v = ExperimentConfig.from_dict(cfg.to_dict())
    if name == "no_fl":
        v.control = dataclasses.replace(v.control, feedback_linearization=False)
    elif name == "raw_obs":
        v.belief = dataclasses.replace(v.belief, mode="raw")
    elif name == "uniform":
        v.credit = dataclasses.replace(v.credit, method="uniform")
    elif name != "full":
        raise UsageError(f"unknown variant {name!r}; choose from {', '.join(ABLATION_VARIANTS)}")
    return v


def cmd_ablate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.episodes is not None:
        cfg.training.episodes = args.episodes
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    if len(set(variants)) != len(variants):
        raise UsageError("variants must be distinct")
    configs = {name: ablation_variant(cfg, name) for name in variants}  # validate before running
    seeds = args.seed if args.seed else cfg.seeds
    out = _out_dir(args.out, cfg)
    rows, finals = [], {}
    for name, vcfg in configs.items():
        log.info("variant %s", name)
        records = _train_into(vcfg, seeds, os.path.join(out, name), tag={"variant": name})
        finals[name] = []
        for rec in records:
            _, last = _window_means(rec)
            conv = convergence_speed(rec.episode_reward, WINDOW) if rec.episodes >= WINDOW else None
            finals[name].append(last)
            rows.append([name, rec.seed, "" if math.isnan(last) else repr(last), "" if conv is None else conv])
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        w.writerows(rows)
    tests = {}
    if "full" in finals:
        for name in variants:
            if name == "full":
                continue
            r = wilcoxon_signed_rank(finals["full"], finals[name])
            tests[name] = {"statistic": _finite(r.statistic), "p_value": _finite(r.p_value), "defined": r.defined, "n": r.n}
    _write_json(os.path.join(out, "ablation_tests.json"), {"config_hash": cfg.digest(), "full_vs": tests})
    print(os.path.join(out, "ablation.csv"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# shapley


def cmd_shapley(args) -> int:
    try:
        with open(args.game) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read game {args.game}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.game}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if args.method == "mc":
        if args.samples < 1:
            raise UsageError(f"--samples must be at least 1, got {args.samples}")
        game = game_from_json(obj, require_complete=False)
        alloc = shapley_mc(game, args.samples, np.random.default_rng(args.seed))
    else:
        alloc = shapley_exact(game_from_json(obj))
    print(json.dumps(alloc.to_json(), sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot

SVG_W, SVG_H, MARGIN = 640, 400, 60
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def read_series(path: str, column: str) -> np.ndarray:
    """Values of ``column``; blank cells are skipped, anything else unparsable is an error."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or column not in header:
            raise ConfigError(f"{path}: row 1: header lacks column {column!r}")
        j = header.index(column)
        out = []
        for k, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ConfigError(f"{path}: row {k}: expected {len(header)} fields, found {len(row)}")
            cell = row[j].strip()
            if not cell:
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ConfigError(f"{path}: row {k}: {column} value {cell!r} is not a number") from None
            if not math.isfinite(v):
                raise ConfigError(f"{path}: row {k}: {column} value {cell!r} is not finite")
            out.append(v)
    return np.array(out)


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def render_svg(series: List[np.ndarray], labels: List[str], window: int = 1, ylabel: str = "reward") -> str:
    """Line chart with one polyline per series, smoothed by a trailing mean."""
    smooth = [moving_average(s, min(window, len(s))) if len(s) else s for s in series]
    xs = [np.arange(len(s)) + (len(raw) - len(s)) for s, raw in zip(smooth, series)]
    allx = np.concatenate([x for x in xs if len(x)] or [np.zeros(1)])
    ally = np.concatenate([s for s in smooth if len(s)] or [np.zeros(1)])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pw, ph = SVG_W - 2 * MARGIN, SVG_H - 2 * MARGIN

    def px(x):
        return MARGIN + (x - x0) / (x1 - x0) * pw

    def py(y):
        return SVG_H - MARGIN - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">',
        f'<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="white"/>',
        f'<line x1="{MARGIN}" y1="{SVG_H - MARGIN}" x2="{SVG_W - MARGIN}" y2="{SVG_H - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{SVG_H - MARGIN}" stroke="black"/>',
        f'<text x="{SVG_W / 2:.0f}" y="{SVG_H - 15}" text-anchor="middle" font-size="13">episode</text>',
        f'<text x="15" y="{SVG_H / 2:.0f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 15 {SVG_H / 2:.0f})">{_esc(ylabel)}</text>',
    ]
    for v, anchor, x, y in (
        (x0, "start", MARGIN, SVG_H - MARGIN + 16),
        (x1, "end", SVG_W - MARGIN, SVG_H - MARGIN + 16),
    ):
        out.append(f'<text x="{x}" y="{y}" text-anchor="{anchor}" font-size="11">{v:g}</text>')
    for v, y in ((y0, SVG_H - MARGIN), (y1, MARGIN)):
        out.append(f'<text x="{MARGIN - 4}" y="{y}" text-anchor="end" font-size="11">{v:.4g}</text>')
    for k, (x, s) in enumerate(zip(xs, smooth)):
        color = COLORS[k % len(COLORS)]
        if len(s):
            pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, s))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
    for k, label in enumerate(labels):
        color = COLORS[k % len(COLORS)]
        y = MARGIN + 14 * k
        out.append(f'<rect class="legend" x="{SVG_W - MARGIN - 150}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{SVG_W - MARGIN - 135}" y="{y + 1}" font-size="11">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(args) -> int:
    if args.window < 1:
        raise UsageError("--window must be at least 1")
    series = [read_series(p, args.column) for p in args.csv]
    labels = [os.path.basename(os.path.dirname(os.path.abspath(p))) + "/" + os.path.basename(p) for p in args.csv]
    svg = render_svg(series, labels, args.window, args.column)
    with open(args.out, "w") as fh:
        fh.write(svg)
    print(args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def aggregate_run(run_dir: str) -> dict:
    """Per-seed metric reports and the first-versus-last-window comparison of a training run."""
    paths = sorted(glob.glob(os.path.join(run_dir, "seed_*", "summary.json")))
    if not paths:
        raise ConfigError(f"{run_dir}: no seed_*/summary.json found")
    seeds, first, last, reports = [], [], [], {}
    for p in paths:
        with open(p) as fh:
            s = json.load(fh)
        rewards = [float("nan") if r is None else r for r in s["episode_reward"]]
        ent = [float("nan") if e is None else e for e in s["entropy"]]
        rep = build_report(rewards, entropy=ent)
        reports[str(s["seed"])] = json.loads(rep.to_json())
        ep = np.asarray(s["eval_episode"], dtype=int)
        ev = np.asarray([np.nan if v is None else v for v in s["eval_reward"]], dtype=float)
        E = len(rewards)
        w = min(WINDOW, E)
        seeds.append(int(s["seed"]))
        first.append(float(ev[ep < w].mean()) if np.any(ep < w) else float("nan"))
        last.append(float(ev[ep >= E - w].mean()) if np.any(ep >= E - w) else float("nan"))
    first, last = np.array(first), np.array(last)
    ok = np.isfinite(first) & np.isfinite(last)
    test = wilcoxon_signed_rank(last[ok], first[ok])
    return {
        "seeds": seeds,
        "reports": reports,
        "first_window_eval": [_finite(v) for v in first],
        "last_window_eval": [_finite(v) for v in last],
        "improved_seeds": int(np.sum(last[ok] > first[ok])),
        "wilcoxon_last_vs_first": {"statistic": _finite(test.statistic), "p_value": _finite(test.p_value), "defined": test.defined},
    }


def cmd_report(args) -> int:
    agg = aggregate_run(args.run_dir)
    text = json.dumps(agg, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="marlcc", description="Multi-agent credit-assignment experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one learner per seed")
    t.add_argument("config")
    t.add_argument("--seed", type=int, action="append", help="train this seed instead of the configured list (repeatable)")
    t.add_argument("--episodes", type=int, help="override training.episodes")
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="deterministic evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0, help="first evaluation seed")
    e.add_argument("--out", help="report file (default: stdout)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train the ablation variants and compare them")
    a.add_argument("config")
    a.add_argument("--variants", help=f"comma-separated subset of {','.join(ABLATION_VARIANTS)}")
    a.add_argument("--seed", type=int, action="append")
    a.add_argument("--episodes", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("shapley", help="Shapley allocation of a coalition game file")
    s.add_argument("game")
    s.add_argument("--method", choices=("exact", "mc"), default="exact")
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_shapley)

    g = sub.add_parser("plot", help="SVG reward curves from episode CSV logs")
    g.add_argument("csv", nargs="+")
    g.add_argument("--out", required=True)
    g.add_argument("--window", type=int, default=1, help="moving-average window")
    g.add_argument("--column", default="reward")
    g.set_defaults(func=cmd_plot)

    r = sub.add_parser("report", help="aggregate a training run directory")
    r.add_argument("run_dir")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, GameSizeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
