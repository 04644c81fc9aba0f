"""Vectorized multi-vehicle world.

A :class:`WorldState` holds ``S`` independent copies ("lanes") of the same
scenario, typically one per seed, so that a seed sweep advances in lockstep.
Lanes never exchange data: each has its own environment stream, one stream
per agent and its own credit stream, and every random draw for lane ``s``
comes from lane ``s``'s streams only.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..belief import logsumexp
from ..comms import ChannelModel
from ..credit import EXACT_WARN, local_members, permutation_prefixes, popcount, shapley_from_table, shapley_matrix
from ..dynamics import BicycleParams, bicycle_feedback, bicycle_rk4, bicycle_rk4_components, wrap_angle
from ..errors import CounterfactualUnavailableError, IntegrationError
from .scenario import Layout, ScenarioConfig, initial_states, make_layout

FEATURE_DIM = 8
ACTION_DIM = 2
CREDIT_MODES = ("exact", "mc", "factorized", "uniform", "none")
BELIEF_MODES = ("particle", "raw")


@dataclass
class BeliefConfig:
    n_particles: int = 1000
    init_std: Tuple[float, float, float, float] = (1.0, 1.0, 0.5, 0.05)
    process_std: Tuple[float, float, float, float] = (0.05, 0.05, 0.1, 0.01)
    resample_threshold: float = 0.5
    mode: str = "particle"  # "raw" feeds noisy observations straight to the policy

    def __post_init__(self):
        if self.mode not in BELIEF_MODES:
            raise ValueError(f"belief mode must be one of {BELIEF_MODES}")
        if self.n_particles < 1:
            raise ValueError("n_particles must be positive")


@dataclass
class EnvConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    channel: ChannelModel = field(default_factory=ChannelModel)
    belief: BeliefConfig = field(default_factory=BeliefConfig)
    feedback_linearization: bool = True
    action_scale: Tuple[float, float] = (2.0, 0.2)  # virtual (m/s^2, rad/s)
    raw_action_scale: Tuple[float, float] = (2.0, 0.05)  # raw (m/s^2, tan delta)
    track_connectivity: bool = False
    credit_baseline: Tuple[float, float] = (0.0, 0.0)  # policy output of agents outside a coalition

    @property
    def params(self) -> BicycleParams:
        sc = self.scenario
        return BicycleParams(sc.wheelbase, sc.v_max, sc.a_min, sc.a_max, sc.delta_max)


def lane_streams(seed: int, n_agents: int):
    """``(env, [agent_0 .. agent_{N-1}], credit, learner)`` generators for one seed."""
    ss = np.random.SeedSequence(int(seed))
    kids = ss.spawn(n_agents + 3)
    env = np.random.default_rng(kids[0])
    agents = [np.random.default_rng(k) for k in kids[1 : n_agents + 1]]
    credit = np.random.default_rng(kids[n_agents + 1])
    learner = np.random.default_rng(kids[n_agents + 2])
    return env, agents, credit, learner


def eval_seed(seed: int) -> int:
    """Fixed seed of the evaluation episodes belonging to training seed ``seed``."""
    return int(np.random.SeedSequence([int(seed), 0xE7A1]).generate_state(1)[0])


@dataclass
class WorldState:
    cfg: EnvConfig
    layout: Layout
    seeds: List[int]
    x: np.ndarray  # (S, N, 4) true states
    particles: np.ndarray  # (S, N, 4, Np), component-major
    weights: np.ndarray  # (S, N, Np)
    obs: np.ndarray  # (S, N, 4) latest own-state observation
    sensed_gap: np.ndarray  # (S, N) along-lane range to predecessor, NaN if unsensed
    last_u: np.ndarray  # (S, N, 2) executed input
    adjacency: np.ndarray  # (S, N, N)
    inbox: np.ndarray  # (S, N, N, 4) latest delivered estimate, [recipient, sender]
    inbox_tick: np.ndarray  # (S, N, N) send tick of that estimate, -1 if none
    pend_payload: np.ndarray  # (S, N, N, D, 4)
    pend_send: np.ndarray  # (S, N, N, D)
    pend_arrive: np.ndarray  # (S, N, N, D), -1 when the slot is empty
    crossed: np.ndarray  # (S, N) bonus bookkeeping
    tick: np.ndarray  # (S,)
    done: np.ndarray  # (S,)
    collided: np.ndarray  # (S,)
    env_rng: list
    agent_rng: list  # [lane][agent]
    credit_rng: list
    degenerate: np.ndarray = None  # (S, N) particle weights collapsed this tick
    est_mean: np.ndarray = None  # (S, N, 4) cached belief mean
    est_sd: np.ndarray = None  # (S, N, 4) cached belief spread

    @property
    def S(self) -> int:
        return self.x.shape[0]

    @property
    def N(self) -> int:
        return self.x.shape[1]


@dataclass
class StepResult:
    u: np.ndarray  # (S, N, 2)
    rewards: np.ndarray  # (S, N)
    R: np.ndarray  # (S,)
    phi: np.ndarray  # (S, N)
    done: np.ndarray  # (S,)
    terminal: np.ndarray  # (S,) collision (bootstrap cut)
    collisions: np.ndarray  # (S,) number of colliding pairs
    msgs_sent: np.ndarray  # (S,)
    msgs_dropped: np.ndarray  # (S,)
    lambda2: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# construction


def make_world(cfg: EnvConfig, seeds: Sequence[int] = None, streams=None) -> WorldState:
    """Create a world with one lane per seed and draw its first episode."""
    sc = cfg.scenario
    seeds = [sc.seed] if seeds is None else [int(s) for s in seeds]
    S, N = len(seeds), sc.n_agents
    Np = cfg.belief.n_particles
    layout = make_layout(sc)
    streams = streams or [lane_streams(s, N) for s in seeds]
    D = int(math.ceil(cfg.channel.delay_max / sc.dt - 1e-9)) + 1
    w = WorldState(
        cfg=cfg,
        layout=layout,
        seeds=seeds,
        x=np.zeros((S, N, 4)),
        particles=np.zeros((S, N, 4, Np)),
        weights=np.full((S, N, Np), 1.0 / Np),
        obs=np.zeros((S, N, 4)),
        sensed_gap=np.full((S, N), np.nan),
        last_u=np.zeros((S, N, 2)),
        adjacency=np.zeros((S, N, N), bool),
        inbox=np.zeros((S, N, N, 4)),
        inbox_tick=np.full((S, N, N), -1, dtype=np.int64),
        pend_payload=np.zeros((S, N, N, D, 4)),
        pend_send=np.zeros((S, N, N, D), dtype=np.int64),
        pend_arrive=np.full((S, N, N, D), -1, dtype=np.int64),
        crossed=np.zeros((S, N), bool),
        tick=np.zeros(S, dtype=np.int64),
        done=np.zeros(S, bool),
        collided=np.zeros(S, bool),
        env_rng=[st[0] for st in streams],
        agent_rng=[st[1] for st in streams],
        credit_rng=[st[2] for st in streams],
        degenerate=np.zeros((S, N), bool),
        est_mean=np.zeros((S, N, 4)),
        est_sd=np.zeros((S, N, 4)),
    )
    reset(w)
    return w


def reset(world: WorldState, lanes=None) -> WorldState:
    """Start a new episode in the given lanes (all by default).

    Initial states come from the lane's environment stream; each agent's
    initial belief is a Gaussian cloud around its true state drawn from the
    agent's own stream.
    """
    cfg, sc = world.cfg, world.cfg.scenario
    lanes = range(world.S) if lanes is None else lanes
    init_std = np.asarray(cfg.belief.init_std, float)
    Np = cfg.belief.n_particles
    for s in lanes:
        x0 = initial_states(sc, world.layout, world.env_rng[s])
        world.x[s] = x0
        for i in range(world.N):
            noise = world.agent_rng[s][i].standard_normal((Np, 4))
            world.particles[s, i] = (x0[i] + noise * init_std).T
        world.weights[s] = 1.0 / Np
        world.obs[s] = x0
        world.sensed_gap[s] = np.nan
        world.last_u[s] = 0.0
        world.inbox[s] = 0.0
        world.inbox_tick[s] = -1
        world.pend_arrive[s] = -1
        world.crossed[s] = False
        world.tick[s] = 0
        world.done[s] = sc.horizon == 0
        world.collided[s] = False
        world.degenerate[s] = False
        world.adjacency[s] = _adjacency(x0[None], sc.comm_radius)[0]
    _refresh_estimate(world)
    return world


def snapshot(world: WorldState) -> WorldState:
    """Frozen deep copy, random stream states included."""
    return copy.deepcopy(world)


def restore(snap: WorldState) -> WorldState:
    return copy.deepcopy(snap)


# ---------------------------------------------------------------------------
# estimates and features


def estimate(world: WorldState) -> Tuple[np.ndarray, np.ndarray]:
    """Per-agent state estimate and its spread, each (S, N, 4)."""
    return world.est_mean.copy(), world.est_sd.copy()


def _refresh_estimate(world: WorldState) -> None:
    world.est_mean, world.est_sd = _belief_moments(world)


def _belief_moments(world: WorldState):
    if world.cfg.belief.mode == "raw":
        return world.obs.copy(), np.zeros_like(world.obs)
    P, w = world.particles, world.weights[..., None, :]
    mean = np.sum(w * P, axis=-1)
    # circular mean for the heading
    psi = P[..., 3, :]
    mean[..., 3] = np.arctan2(np.sum(w[..., 0, :] * np.sin(psi), axis=-1), np.sum(w[..., 0, :] * np.cos(psi), axis=-1))
    diff = P - mean[..., None]
    diff[..., 3, :] = wrap_angle(diff[..., 3, :])
    sd = np.sqrt(np.maximum(np.sum(w * diff * diff, axis=-1), 0.0))
    return mean, sd


def features(world: WorldState) -> np.ndarray:
    """Local policy inputs (S, N, FEATURE_DIM).

    Agent ``i`` uses only its own estimate, its own range sensor and the
    estimates its neighbours have delivered to it.
    """
    sc, rw, lay = world.cfg.scenario, world.cfg.scenario.reward, world.layout
    m, sd = estimate(world)
    S, N = world.S, world.N
    f = np.zeros((S, N, FEATURE_DIM))
    f[..., 0] = (m[..., 2] - rw.cruise_speed) / sc.v_max
    f[..., 1] = lay.lateral(m[..., :2]) / sc.lane_width
    f[..., 2] = wrap_angle(m[..., 3] - lay.lane_heading)
    pred = lay.predecessor
    has = pred >= 0
    if has.any():
        idx = np.flatnonzero(has)
        p = pred[idx]
        msg_ok = world.inbox_tick[:, idx, p] >= 0
        est = world.inbox[:, idx, p]  # (S, k, 4)
        c, s_ = np.cos(lay.lane_heading[idx]), np.sin(lay.lane_heading[idx])
        gap_msg = c * (est[..., 0] - m[:, idx, 0]) + s_ * (est[..., 1] - m[:, idx, 1])
        sensed = world.sensed_gap[:, idx]
        use_sense = np.isfinite(sensed)
        gap = np.where(use_sense, sensed, gap_msg)
        ok = use_sense | msg_ok
        f[:, idx, 3] = np.where(ok, np.clip((gap - rw.headway) / rw.headway, -3.0, 3.0), 0.0)
        f[:, idx, 4] = np.where(msg_ok, (est[..., 2] - m[:, idx, 2]) / sc.v_max, 0.0)
        f[:, idx, 5] = ok
    f[..., 6] = np.minimum(sd[..., 2], 5.0)
    f[..., 7] = np.minimum(0.5 * (sd[..., 0] + sd[..., 1]), 5.0)
    return f


# ---------------------------------------------------------------------------
# physics and rewards


def _adjacency(x: np.ndarray, r_c: float) -> np.ndarray:
    pos = x[..., :2]
    diff = pos[..., :, None, :] - pos[..., None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    adj = dist <= r_c
    n = x.shape[-2]
    adj[..., np.arange(n), np.arange(n)] = False
    return adj


def control_inputs(world: WorldState, actions: np.ndarray) -> np.ndarray:
    """Map policy outputs to bicycle inputs ``(a, tan delta)`` for every agent.

    With feedback linearization the outputs are virtual controls for the
    longitudinal and heading channels, linearized at the agent's own
    estimate; otherwise they are scaled raw inputs.  Zero output maps to
    zero input either way.
    """
    cfg = world.cfg
    params = cfg.params
    if cfg.feedback_linearization:
        m, _ = estimate(world)
        v = actions * np.asarray(cfg.action_scale)
        u, _, _ = bicycle_feedback(m, v, params, world.layout.lane_heading)
        return u
    u = actions * np.asarray(cfg.raw_action_scale)
    tan_max = math.tan(params.delta_max)
    return np.clip(u, [params.a_min, -tan_max], [params.a_max, tan_max])


def _propagate(world: WorldState, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    sc = world.cfg.scenario
    nxt = bicycle_rk4(x, u, sc.dt, sc.wheelbase) + w
    nxt[..., 2] = np.clip(nxt[..., 2], 0.0, sc.v_max)
    nxt[..., 3] = wrap_angle(nxt[..., 3])
    return nxt


def reward_terms(world: WorldState, x_next: np.ndarray, u: np.ndarray, crossed: np.ndarray):
    """Per-agent rewards for post-step states ``x_next`` (..., N, 4).

    Returns ``(rewards, collision_pairs, newly_crossed)``; the leading axes
    of ``x_next`` may include a coalition axis.
    """
    sc, rw, lay = world.cfg.scenario, world.cfg.scenario.reward, world.layout
    dt = sc.dt
    N = x_next.shape[-2]
    v = x_next[..., 2]
    pos = x_next[..., :2]
    cost = (rw.c0 + rw.c1 * v + rw.c2 * v * v) * dt
    yaw_rate = v * u[..., 1] / sc.wheelbase
    cost = cost + (rw.effort_weight * u[..., 0] ** 2 + rw.yaw_effort_weight * yaw_rate**2) * dt
    diff = pos[..., :, None, :] - pos[..., None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    dist[..., np.arange(N), np.arange(N)] = np.inf
    cost = cost + rw.safety_weight * np.sum(np.maximum(0.0, rw.d_min - dist), axis=-1)
    rel_heading = x_next[..., 3] - lay.lane_heading
    pred = lay.predecessor
    if np.any(pred >= 0):
        idx = np.flatnonzero(pred >= 0)
        hd = lay.lane_heading[idx]
        c, s = np.cos(hd), np.sin(hd)
        d = pos[..., pred[idx], :] - pos[..., idx, :]
        gap = c * d[..., 0] + s * d[..., 1]
        # closing rate along the follower's lane
        vp = v[..., pred[idx]] * np.cos(x_next[..., pred[idx], 3] - hd)
        vi = v[..., idx] * np.cos(rel_heading[..., idx])
        err = gap + rw.headway_lookahead * (vp - vi) - rw.headway
        head = np.zeros(v.shape)
        head[..., idx] = rw.headway_weight * err**2 * dt
        cost = cost + head
    cost = cost + rw.speed_weight * (v - rw.cruise_speed) ** 2 * dt
    lat = lay.lateral(pos)
    lat_ahead = lat + rw.lateral_lookahead * v * np.sin(rel_heading)
    cost = cost + rw.lateral_weight * lat_ahead**2 * dt
    bonus = np.zeros(v.shape)
    newly = np.zeros(v.shape, bool)
    if sc.kind == "intersection":
        newly = (lay.along(pos) > 0.0) & ~crossed
        bonus = rw.throughput_bonus * newly
    elif sc.kind == "lane-merge":
        newly = lay.on_ramp & (np.abs(lat) < 0.5) & ~crossed
        bonus = rw.merge_bonus * newly
        past_gate = lay.on_ramp & (lay.along(pos) > sc.merge_gate) & (np.abs(lat) > sc.lane_width / 2)
        cost = cost + rw.gate_weight * np.abs(lat) * past_gate * dt
    hit = dist < rw.collision_radius
    involved = hit.any(axis=-1)
    cost = cost + rw.collision_penalty * involved
    pairs = np.sum(hit, axis=(-1, -2)) // 2
    return bonus - cost, pairs, newly


def _coalition_masks(world: WorldState, mode: str, M: int, active) -> Tuple[np.ndarray, dict]:
    """Coalition rows to evaluate per lane; row 0 is always the grand coalition."""
    N, S = world.N, world.S
    full = (1 << N) - 1
    info = {}
    if mode == "exact":
        masks = np.concatenate([[full], np.arange(full)])
        return np.broadcast_to(masks, (S, len(masks))).copy(), info
    if mode == "mc":
        rows = np.full((S, 1 + M * (N + 1)), full, dtype=np.int64)
        perms = np.zeros((S, M, N), dtype=np.int64)
        for s in np.flatnonzero(active):
            p, prefix = permutation_prefixes(N, M, world.credit_rng[s])
            perms[s] = p
            rows[s, 1:] = prefix.ravel()
        info["perms"] = perms
        return rows, info
    if mode == "factorized":
        per_lane, locals_ = [], []
        for s in range(S):
            needed = {full}
            lane_local = []
            for i in range(N):
                mem = local_members(i, np.flatnonzero(world.adjacency[s, i]))
                k = len(mem)
                gmask = np.zeros(1 << k, dtype=np.int64)
                for b, j in enumerate(mem):
                    gmask |= ((np.arange(1 << k) >> b) & 1) << j
                lane_local.append((mem, gmask))
                needed.update(gmask.tolist())
            needed.discard(full)
            per_lane.append([full] + sorted(needed))
            locals_.append(lane_local)
        width = max(len(r) for r in per_lane)
        rows = np.full((S, width), full, dtype=np.int64)
        for s, r in enumerate(per_lane):
            rows[s, : len(r)] = r
        info["locals"] = locals_
        return rows, info
    return np.full((S, 1), full, dtype=np.int64), info


def _shapley_rows(table: np.ndarray) -> np.ndarray:
    """Exact Shapley values of value tables (..., 2^n); row-wise products keep
    each lane's rounding independent of the batch size."""
    n = int(round(math.log2(table.shape[-1])))
    if n > EXACT_WARN:
        return shapley_from_table(table)
    return np.sum(table[..., None, :] * shapley_matrix(n), axis=-1)


def _credit(world: WorldState, mode: str, rows, info, r_all: np.ndarray) -> np.ndarray:
    """Per-agent credit from the coalition reward table ``r_all`` (S, C, N)."""
    S, N = world.S, world.N
    R_all = r_all.sum(axis=-1)  # (S, C)
    if mode == "exact":
        table = np.empty((S, 1 << N))
        table[:, rows[0]] = R_all
        return _shapley_rows(table)
    if mode == "mc":
        perms = info["perms"]
        M = perms.shape[1]
        vals = R_all[:, 1:].reshape(S, M, N + 1)
        steps = np.diff(vals, axis=-1)
        marg = np.empty_like(steps)
        np.put_along_axis(marg, perms, steps, axis=-1)
        return marg.mean(axis=1)
    if mode == "factorized":
        phi = np.zeros((S, N))
        for s in range(S):
            pos = {int(m): c for c, m in enumerate(rows[s])}
            for i, (mem, gmask) in enumerate(info["locals"][s]):
                local_r = r_all[s][[pos[int(g)] for g in gmask]][:, mem].sum(axis=-1)
                phi[s, i] = _shapley_rows(local_r)[mem.index(i)]
        return phi
    return R_all[:, :1] / N * np.ones((1, N))


# ---------------------------------------------------------------------------
# the step


def step(world: WorldState, actions, credit: str = "none", mc_samples: int = 20, active=None) -> StepResult:
    """Advance every active lane by one tick.

    Order inside a tick: map actions to inputs, integrate the true vehicles
    (RK4 plus process noise), score the outcome, exchange state estimates
    over the lossy channel, then predict and update each agent's particle
    belief with its own noisy observation.

    Credit is computed from one-step counterfactuals that share this tick's
    noise draws: coalition members apply their inputs, everyone else the
    baseline output (zero by default).  The grand-coalition row is the live
    transition.
    """
    if credit not in CREDIT_MODES:
        raise ValueError(f"credit mode must be one of {CREDIT_MODES}")
    cfg, sc = world.cfg, world.cfg.scenario
    S, N = world.S, world.N
    actions = np.asarray(actions, dtype=float).reshape(S, N, ACTION_DIM)
    active = ~world.done if active is None else np.asarray(active, bool) & ~world.done
    u = control_inputs(world, actions)
    u[~active] = 0.0
    base = np.asarray(cfg.credit_baseline, dtype=float)
    u_base = control_inputs(world, np.broadcast_to(base, actions.shape)) if base.any() else np.zeros_like(u)
    u_base[~active] = 0.0

    # one draw per lane feeds the process noise (shared by every
    # counterfactual row) and the channel's loss and delay variates
    pstd = np.asarray(sc.process_std, float)
    z = np.zeros((S, N * 4 + 2 * N * N))
    for s in np.flatnonzero(active):
        world.env_rng[s].standard_normal(out=z[s])
    w = z[:, : 4 * N].reshape(S, N, 4) * pstd
    chan_z = z[:, 4 * N :].reshape(S, 2, N, N)

    rows, info = _coalition_masks(world, credit, mc_samples, active)
    C = rows.shape[1]
    bits = ((rows[..., None] >> np.arange(N)) & 1).astype(bool)  # (S, C, N)
    u_rows = np.where(bits[..., None], u[:, None], u_base[:, None])
    x_rows = _propagate(world, np.broadcast_to(world.x[:, None], (S, C, N, 4)), u_rows, w[:, None])
    r_rows, pairs_rows, newly_rows = reward_terms(world, x_rows, u_rows, world.crossed[:, None])

    x_next = x_rows[:, 0]
    rewards = r_rows[:, 0]
    R = rewards.sum(axis=-1)
    pairs = pairs_rows[:, 0]
    if credit == "none":
        phi = rewards.copy()
    else:
        phi = _credit(world, credit, rows, info, r_rows)

    terminal = (pairs > 0) & active
    tick = world.tick + active
    done_now = terminal | (tick >= sc.horizon)

    # commit the physical state for active lanes only
    a = active
    world.x[a] = x_next[a]
    world.last_u[a] = u[a]
    world.crossed[a] |= newly_rows[:, 0][a]

    sent, dropped = _exchange(world, a, tick, chan_z)
    _sense_and_filter(world, a, u)
    world.tick = tick
    world.done = world.done | done_now
    world.collided = world.collided | terminal
    lam2 = _lambda2(world.adjacency) if cfg.track_connectivity else None
    return StepResult(
        u=u,
        rewards=np.where(a[:, None], rewards, 0.0),
        R=np.where(a, R, 0.0),
        phi=np.where(a[:, None], phi, 0.0),
        done=world.done.copy(),
        terminal=terminal,
        collisions=np.where(a, pairs, 0),
        msgs_sent=sent,
        msgs_dropped=dropped,
        lambda2=lam2,
    )


def _lambda2(adj: np.ndarray) -> np.ndarray:
    A = adj.astype(float)
    deg = A.sum(axis=-1)
    L = -A
    n = A.shape[-1]
    L[..., np.arange(n), np.arange(n)] = deg
    if n < 2:
        return np.zeros(A.shape[0])
    lam = np.linalg.eigvalsh(L)[..., 1]
    return np.where(lam > 1e-9, lam, 0.0)


def _exchange(world: WorldState, active, tick, chan_z) -> Tuple[np.ndarray, np.ndarray]:
    """Send each agent's estimate to its current neighbours and deliver due messages."""
    cfg, sc, ch = world.cfg, world.cfg.scenario, world.cfg.channel
    S, N = world.S, world.N
    D = world.pend_arrive.shape[-1]
    world.adjacency[active] = _adjacency(world.x[active], sc.comm_radius)
    est = world.est_mean
    # a standard normal falls below the p-quantile with probability p
    lost = chan_z[:, 0] < _normal_quantile(ch.p_loss)
    delay = ch.delay_mean + ch.delay_std * chan_z[:, 1]
    for s in np.flatnonzero(active):
        _redraw_out_of_range(ch, world.env_rng[s], delay[s])
    adj = world.adjacency & active[:, None, None]  # [sender, recipient], symmetric
    live = adj & ~lost
    sent = adj.sum(axis=(1, 2))
    dropped = (adj & lost).sum(axis=(1, 2))
    lanes = np.flatnonzero(active)
    t_send = world.tick[lanes]
    slot = t_send % D
    ticks = np.ceil(np.round(delay[lanes] / sc.dt, 9)).astype(np.int64)
    # pending arrays are indexed [recipient, sender]
    live_rs = np.swapaxes(live[lanes], 1, 2)
    ticks_rs = np.swapaxes(ticks, 1, 2)
    world.pend_arrive[lanes, :, :, slot] = np.where(live_rs, t_send[:, None, None] + ticks_rs, -1)
    world.pend_send[lanes, :, :, slot] = t_send[:, None, None]
    world.pend_payload[lanes, :, :, slot] = est[lanes][:, None, :, :]
    # deliver everything due by the end of this tick
    now = np.where(active, tick, -1)[:, None, None, None]
    due = (world.pend_arrive >= 0) & (world.pend_arrive <= now)
    if due.any():
        st = np.where(due, world.pend_send, -1)
        best = st.argmax(axis=-1)  # newest due message per (recipient, sender)
        best_t = np.take_along_axis(st, best[..., None], axis=-1)[..., 0]
        newer = best_t > world.inbox_tick
        pay = np.take_along_axis(world.pend_payload, best[..., None, None], axis=-2)[..., 0, :]
        world.inbox = np.where(newer[..., None], pay, world.inbox)
        world.inbox_tick = np.where(newer, best_t, world.inbox_tick)
        world.pend_arrive[due] = -1
    return sent, dropped


def _normal_quantile(p: float) -> float:
    if p <= 0.0:
        return -np.inf
    if p >= 1.0:
        return np.inf
    return NormalDist().inv_cdf(p)


def _redraw_out_of_range(ch: ChannelModel, rng: np.random.Generator, d: np.ndarray) -> None:
    """Rejection step of the truncated Gaussian, in place."""
    bad = (d < 0.0) | (d > ch.delay_max)
    while bad.any():
        d[bad] = ch.delay_mean + ch.delay_std * rng.standard_normal(int(bad.sum()))
        bad = (d < 0.0) | (d > ch.delay_max)


def systematic_rows(weights: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Systematic resampling indices for each row of ``weights`` (K, Np).

    Row ``k`` uses the positions ``(offsets[k] + j) / Np``; the count of
    positions below each cdf entry gives every particle's copy count.
    """
    K, Np = weights.shape
    cdf = np.cumsum(weights, axis=-1)
    below = np.clip(np.ceil(cdf * Np - offsets[:, None]), 0, Np).astype(np.int64)
    below[:, -1] = Np
    counts = np.diff(below, axis=-1, prepend=0)
    return np.repeat(np.tile(np.arange(Np), K), counts.ravel()).reshape(K, Np)


def _sense_and_filter(world: WorldState, active, u: np.ndarray) -> None:
    """Observe, then run the predict/update/resample cycle for every agent."""
    cfg, sc, bc = world.cfg, world.cfg.scenario, world.cfg.belief
    S, N = world.S, world.N
    Np = bc.n_particles
    lay = world.layout
    ostd = np.asarray(sc.obs_std, float)
    qstd = np.asarray(bc.process_std, float)
    particle = bc.mode == "particle"
    pred = lay.predecessor
    n_draw = 4 + 2 + (Np * 4 if particle else 0)
    draws = np.zeros((S, N, n_draw))
    for s in np.flatnonzero(active):
        for i in range(N):
            draws[s, i] = world.agent_rng[s][i].standard_normal(n_draw)
    x = world.x
    z = x + draws[..., :4] * ostd
    z[..., 3] = wrap_angle(z[..., 3])
    # range and bearing to the predecessor when it is within sensing range
    gap = np.full((S, N), np.nan)
    if np.any(pred >= 0):
        idx = np.flatnonzero(pred >= 0)
        d = x[:, pred[idx], :2] - x[:, idx, :2]
        rng_true = np.sqrt(np.sum(d * d, axis=-1))
        bearing = np.arctan2(d[..., 1], d[..., 0]) - x[:, idx, 3]
        meas_r = rng_true + sc.range_std * draws[:, idx, 4]
        meas_b = bearing + sc.bearing_std * draws[:, idx, 5]
        head_est = z[:, idx, 3]
        along = meas_r * np.cos(meas_b + head_est - lay.lane_heading[idx])
        gap[:, idx] = np.where(rng_true <= sc.sensing, along, np.nan)
    a = active
    world.obs[a] = z[a]
    world.sensed_gap[a] = gap[a]
    if not particle:
        _refresh_estimate(world)
        return
    noise = draws[..., 6:].reshape(S, N, 4, Np) * qstd[:, None]
    P = world.particles
    nx, ny, nv, npsi = bicycle_rk4_components(
        P[:, :, 0], P[:, :, 1], P[:, :, 2], P[:, :, 3], u[..., 0:1], u[..., 1:2] / sc.wheelbase, sc.dt
    )
    parts = np.empty_like(P)
    parts[:, :, 0] = nx + noise[:, :, 0]
    parts[:, :, 1] = ny + noise[:, :, 1]
    parts[:, :, 2] = np.clip(nv + noise[:, :, 2], 0.0, sc.v_max)
    parts[:, :, 3] = wrap_angle(npsi + noise[:, :, 3])
    if not np.all(np.isfinite(parts)):
        raise IntegrationError("belief prediction produced a non-finite particle")
    resid = (z[..., None] - parts) / ostd[:, None]
    resid[:, :, 3] = wrap_angle(z[..., 3:4] - parts[:, :, 3]) / ostd[3]
    loglik = -0.5 * np.sum(resid * resid, axis=-2)
    with np.errstate(divide="ignore"):
        logw = np.log(world.weights) + loglik
    norm = logsumexp(logw, axis=-1, keepdims=True)
    bad = ~np.isfinite(norm[..., 0])
    with np.errstate(invalid="ignore"):
        wts = np.exp(logw - np.where(np.isfinite(norm), norm, 0.0))
    wts[bad] = 1.0 / Np
    world.particles[a] = parts[a]
    world.weights[a] = wts[a]
    world.degenerate[a] = bad[a]
    ess = 1.0 / np.sum(world.weights**2, axis=-1)
    low = (ess < bc.resample_threshold * Np) & active[:, None]
    if low.any():
        # systematic resampling, one offset per flagged agent from its own stream
        rows = np.nonzero(low)
        offs = np.array([world.agent_rng[s][i].random() for s, i in zip(*rows)])
        idx = systematic_rows(world.weights[rows], offs)
        world.particles[rows] = np.take_along_axis(world.particles[rows], idx[:, None, :], axis=-1)
        world.weights[rows] = 1.0 / Np
    _refresh_estimate(world)


# ---------------------------------------------------------------------------
# counterfactual oracle


class SnapshotOracle:
    """Counterfactual global reward from a frozen single-lane world.

    ``reward_of`` re-steps a copy of the snapshot with the given policy
    outputs, so every query sees the same random draws.
    """

    def __init__(self, snap: Optional[WorldState], lane: int = 0):
        if snap is None:
            raise CounterfactualUnavailableError("no environment snapshot to re-step")
        self.snap = snap
        self.lane = lane

    def reward_of(self, actions) -> float:
        w = restore(self.snap)
        full = np.zeros((w.S, w.N, ACTION_DIM))
        full[self.lane] = actions
        res = step(w, full)
        return float(res.R[self.lane])
