"""Episode and training loops over a (possibly multi-lane) world.

Policies only ever see the local feature array produced by
:func:`~marlcc.env.world.features`; global state stays inside the world.
"""

from __future__ import annotations

import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from ..errors import MarlccError
from ..learner import LearnerConfig, MultiAgentLearner
from .world import (
    ACTION_DIM,
    CREDIT_MODES,
    FEATURE_DIM,
    EnvConfig,
    WorldState,
    eval_seed,
    features,
    lane_streams,
    make_world,
    reset,
    step,
)

log = logging.getLogger(__name__)

STEP_COLUMNS_FIXED = ("tick", "R", "collisions", "msgs_sent", "msgs_dropped")
EPISODE_COLUMNS = (
    "episode",
    "reward",
    "length",
    "collisions",
    "effort_var",
    "msgs_sent",
    "msgs_dropped",
    "td_error",
    "entropy",
    "eval_reward",
)


def step_columns(n_agents: int) -> List[str]:
    return ["tick", "R"] + [f"phi_{i + 1}" for i in range(n_agents)] + ["collisions", "msgs_sent", "msgs_dropped"]


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if np.isnan(x) else repr(x)


@dataclass
class EpisodeLog:
    n_agents: int
    R: np.ndarray
    phi: np.ndarray
    rewards: np.ndarray
    actions: np.ndarray
    u: np.ndarray
    collisions: np.ndarray
    msgs_sent: np.ndarray
    msgs_dropped: np.ndarray
    lambda2: Optional[np.ndarray] = None
    positions: Optional[np.ndarray] = None
    td_error: float = float("nan")
    error: Optional[str] = None

    @property
    def length(self) -> int:
        return len(self.R)

    @property
    def cumulative_reward(self) -> float:
        return float(np.sum(self.R))

    @property
    def collision_count(self) -> int:
        return int(np.sum(self.collisions))

    @property
    def effort_variance(self) -> float:
        """Variance of the applied accelerations over agents and steps."""
        return float(np.var(self.u[..., 0])) if self.length else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(step_columns(self.n_agents)) + "\n")
        for t in range(self.length):
            row = [t + 1, self.R[t], *self.phi[t], self.collisions[t], self.msgs_sent[t], self.msgs_dropped[t]]
            buf.write(",".join(_fmt(v) for v in row) + "\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


class _LogBuilder:
    def __init__(self, n_agents: int, record: bool):
        self.n = n_agents
        self.record = record
        self.rows = {k: [] for k in ("R", "phi", "rewards", "actions", "u", "collisions", "sent", "dropped", "lam", "pos")}
        self.td = []

    def add(self, s, res, actions, world):
        r = self.rows
        r["R"].append(res.R[s])
        r["phi"].append(res.phi[s])
        r["rewards"].append(res.rewards[s])
        r["actions"].append(actions[s])
        r["u"].append(res.u[s])
        r["collisions"].append(res.collisions[s])
        r["sent"].append(res.msgs_sent[s])
        r["dropped"].append(res.msgs_dropped[s])
        if res.lambda2 is not None:
            r["lam"].append(res.lambda2[s])
        if self.record:
            r["pos"].append(world.x[s, :, :2].copy())

    def build(self, error=None) -> EpisodeLog:
        r, n = self.rows, self.n
        arr = lambda k, shape: np.array(r[k], dtype=float).reshape((-1,) + shape)
        td = np.array([v for v in self.td if np.isfinite(v)])
        return EpisodeLog(
            n_agents=n,
            R=arr("R", ()),
            phi=arr("phi", (n,)),
            rewards=arr("rewards", (n,)),
            actions=arr("actions", (n, ACTION_DIM)),
            u=arr("u", (n, 2)),
            collisions=np.array(r["collisions"], dtype=np.int64),
            msgs_sent=np.array(r["sent"], dtype=np.int64),
            msgs_dropped=np.array(r["dropped"], dtype=np.int64),
            lambda2=arr("lam", ()) if r["lam"] else None,
            positions=arr("pos", (n, 2)) if self.record else None,
            td_error=float(td.mean()) if td.size else float("nan"),
            error=error,
        )


class FunctionPolicy:
    """Deterministic policy from a function of the local features (S, N, F) -> (S, N, A)."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def act(self, features, deterministic=True, active=None):
        return np.asarray(self.fn(features), dtype=float)


def zero_policy() -> FunctionPolicy:
    return FunctionPolicy(lambda f: np.zeros(f.shape[:-1] + (ACTION_DIM,)))


def run_episode(
    world: WorldState,
    policies,
    credit: str = "exact",
    learn: bool = False,
    deterministic: bool = False,
    mc_samples: int = 20,
    record: bool = False,
) -> List[EpisodeLog]:
    """Run every lane of ``world`` from its current state to the end of its episode.

    Returns one log per lane.  With ``learn`` the policies must provide
    ``observe``; each agent learns from its own credit ``phi_i``, and only a
    collision cuts the bootstrap.
    """
    if credit not in CREDIT_MODES:
        raise ValueError(f"credit mode must be one of {CREDIT_MODES}")
    S, N = world.S, world.N
    builders = [_LogBuilder(N, record) for _ in range(S)]
    feats = features(world)
    try:
        while not world.done.all():
            active = ~world.done
            acts = policies.act(feats, deterministic=deterministic, active=active)
            res = step(world, acts, credit=credit, mc_samples=mc_samples, active=active)
            nxt = features(world)
            if learn:
                stats = policies.observe(feats, acts, res.phi, nxt, res.terminal, active)
                if stats is not None:
                    for s in np.flatnonzero(active):
                        builders[s].td.append(stats["td_error"][s])
            for s in np.flatnonzero(active):
                builders[s].add(s, res, acts, world)
            feats = nxt
    except MarlccError as exc:
        log.error("episode aborted at ticks %s: %s", world.tick.tolist(), exc)
        exc.episode_logs = [b.build(error=str(exc)) for b in builders]
        raise
    return [b.build() for b in builders]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingConfig:
    episodes: int = 2000
    eval_interval: int = 10
    checkpoint_every: int = 0  # 0: only the final checkpoint
    credit: str = "exact"
    mc_samples: int = 20

    def __post_init__(self):
        if self.episodes < 0:
            raise ValueError("episodes must be nonnegative")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be at least 1")
        if self.credit not in CREDIT_MODES:
            raise ValueError(f"credit mode must be one of {CREDIT_MODES}")


@dataclass
class TrainingRecord:
    seed: int
    episode_reward: List[float] = field(default_factory=list)
    episode_length: List[int] = field(default_factory=list)
    episode_collisions: List[int] = field(default_factory=list)
    effort_var: List[float] = field(default_factory=list)
    msgs_sent: List[int] = field(default_factory=list)
    msgs_dropped: List[int] = field(default_factory=list)
    td_error: List[float] = field(default_factory=list)
    entropy: List[float] = field(default_factory=list)
    eval_episode: List[int] = field(default_factory=list)
    eval_reward: List[float] = field(default_factory=list)
    eval_collisions: List[int] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)

    @property
    def episodes(self) -> int:
        return len(self.episode_reward)

    def eval_series(self) -> np.ndarray:
        """Evaluation reward indexed by training episode (NaN where none ran)."""
        out = np.full(self.episodes, np.nan)
        out[np.asarray(self.eval_episode, dtype=int)] = self.eval_reward
        return out

    def window_eval_mean(self, first: bool, window: int = 100) -> float:
        ep = np.asarray(self.eval_episode)
        r = np.asarray(self.eval_reward)
        sel = ep < window if first else ep >= self.episodes - window
        return float(r[sel].mean()) if sel.any() else float("nan")

    def to_csv(self) -> str:
        ev = self.eval_series()
        buf = io.StringIO()
        buf.write(",".join(EPISODE_COLUMNS) + "\n")
        for e in range(self.episodes):
            row = [
                e,
                self.episode_reward[e],
                self.episode_length[e],
                self.episode_collisions[e],
                self.effort_var[e],
                self.msgs_sent[e],
                self.msgs_dropped[e],
                self.td_error[e],
                self.entropy[e],
                ev[e],
            ]
            buf.write(",".join(_fmt(v) for v in row) + "\n")
        return buf.getvalue()

    def summary(self) -> dict:
        def clean(xs):
            return [None if (isinstance(x, float) and np.isnan(x)) else x for x in xs]

        d = asdict(self)
        for k in ("td_error", "entropy", "effort_var", "episode_reward", "eval_reward"):
            d[k] = clean([float(x) for x in d[k]])
        return d


def evaluate(env_cfg: EnvConfig, policies, seeds: Sequence[int], record: bool = False) -> List[EpisodeLog]:
    """One deterministic, non-learning episode per seed on its fixed evaluation stream."""
    world = make_world(env_cfg, [eval_seed(s) for s in seeds])
    return run_episode(world, policies, credit="none", learn=False, deterministic=True, record=record)


def run_training(
    env_cfg: EnvConfig,
    learner_cfg: LearnerConfig,
    train_cfg: TrainingConfig,
    seeds: Sequence[int],
    out_dir: Optional[str] = None,
    progress: Optional[Callable[[int, List[TrainingRecord]], None]] = None,
):
    """Train one independent learner per seed, all seeds advancing in lockstep.

    Returns ``(records, learner)``; lane ``s`` of the learner belongs to
    ``seeds[s]``.  A lane's record depends only on its own seed.
    """
    seeds = [int(s) for s in seeds]
    N = env_cfg.scenario.n_agents
    streams = [lane_streams(s, N) for s in seeds]
    learner = MultiAgentLearner(N, FEATURE_DIM, ACTION_DIM, learner_cfg, [st[3] for st in streams], env_cfg.scenario.dt)
    records = [TrainingRecord(seed=s) for s in seeds]
    world = make_world(env_cfg, seeds, streams) if train_cfg.episodes else None
    for e in range(train_cfg.episodes):
        if e > 0:
            reset(world)
        learner.reset_noise()
        logs = run_episode(world, learner, train_cfg.credit, learn=True, mc_samples=train_cfg.mc_samples)
        ent = learner.entropy()
        for s, (rec, lg) in enumerate(zip(records, logs)):
            rec.episode_reward.append(lg.cumulative_reward)
            rec.episode_length.append(lg.length)
            rec.episode_collisions.append(lg.collision_count)
            rec.effort_var.append(lg.effort_variance)
            rec.msgs_sent.append(int(lg.msgs_sent.sum()))
            rec.msgs_dropped.append(int(lg.msgs_dropped.sum()))
            rec.td_error.append(lg.td_error)
            rec.entropy.append(float(ent[s]))
        if (e + 1) % train_cfg.eval_interval == 0:
            for rec, lg in zip(records, evaluate(env_cfg, learner, seeds)):
                rec.eval_episode.append(e)
                rec.eval_reward.append(lg.cumulative_reward)
                rec.eval_collisions.append(lg.collision_count)
        if out_dir and train_cfg.checkpoint_every and (e + 1) % train_cfg.checkpoint_every == 0:
            _checkpoint(learner, records, out_dir, f"ep{e + 1:06d}")
        if progress is not None:
            progress(e, records)
    if out_dir:
        _checkpoint(learner, records, out_dir, "final")
    return records, learner


def _checkpoint(learner, records, out_dir, tag):
    for s, rec in enumerate(records):
        path = os.path.join(out_dir, f"seed_{rec.seed}", "checkpoints", tag)
        learner.save(path, lane=s, meta={"seed": rec.seed, "episodes": rec.episodes})
        rec.checkpoints.append(os.path.relpath(path, out_dir))


def write_record(rec: TrainingRecord, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "episodes.csv"), "w", newline="") as fh:
        fh.write(rec.to_csv())
    with open(os.path.join(directory, "summary.json"), "w") as fh:
        json.dump(rec.summary(), fh, indent=1, sort_keys=True)


def closed_loop_stability(env_cfg: EnvConfig, policy, seed: int, steps: int = 200, dim: int = 0, delta0: float = 1e-6):
    """Largest Lyapunov exponent of the deterministic closed loop of one seed.

    A nominal and a perturbed world share the seed and therefore every noise
    draw; the perturbation lives in the true vehicle states.  Ticks after the
    nominal episode ends are not evaluated.
    """
    from ..metrics import stability_index

    worlds = [make_world(env_cfg, [seed]), make_world(env_cfg, [seed])]
    calls = [0]

    def advance(x, k):
        w = worlds[calls[0] % 2]  # calls alternate nominal, perturbed
        calls[0] += 1
        w.x[0] = x.reshape(w.x[0].shape)
        w.done[:] = False
        step(w, policy.act(features(w), deterministic=True), credit="none")
        return w.x[0].copy()

    steps = min(steps, env_cfg.scenario.horizon)
    return stability_index(advance, worlds[0].x[0], env_cfg.scenario.dt, steps, dim, delta0)
