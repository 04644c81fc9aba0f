"""Per-agent actor-critic learners evaluated as one stacked ensemble.

Every agent owns its own policy, critic, replay slice and exploration
state; stacking them along a leading axis only changes how the arithmetic
is scheduled, never which data an agent sees.  Independent training runs
("lanes", one per seed) can be stacked the same way: ensemble member
``s * n_agents + i`` is agent ``i`` of lane ``s`` and each lane keeps its own
random stream, replay buffer and update counter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from ..errors import CheckpointError
from .actor_critic import (
    GRAD_CLIP,
    LOG_STD_MAX,
    LOG_STD_MIN,
    Critic,
    GaussianPolicy,
    critic_loss_grad,
    entropy,
    make_critic,
    make_policy,
    policy_gradient,
    td_targets,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .mlp import MLP, clip_by_global_norm, mlp_forward
from .noise import OUNoise, StepSchedule
from .replay import ReplayBuffer


@dataclass
class LearnerConfig:
    hidden: Tuple[int, ...] = (64, 64)
    gamma: float = 0.98
    alpha: StepSchedule = field(default_factory=lambda: StepSchedule("constant", 1e-3))
    beta: StepSchedule = field(default_factory=lambda: StepSchedule("constant", 5e-4))
    buffer_capacity: int = 500_000
    batch_size: int = 256
    warmup: int = 1000
    update_every: int = 1
    bootstrap: str = "mean"
    target_tau: Optional[float] = None  # Polyak rate of an optional target critic
    ou_theta: float = 0.15
    ou_sigma: float = 0.2
    init_log_std: float = -1.0
    learn_log_std: bool = True
    reward_scale: float = 1.0
    grad_clip: float = GRAD_CLIP


def _member_lr(lr: np.ndarray, ndim: int) -> np.ndarray:
    return lr.reshape((-1,) + (1,) * (ndim - 1))


class MultiAgentLearner:
    def __init__(
        self,
        n_agents: int,
        feature_dim: int,
        action_dim: int,
        cfg: LearnerConfig,
        rngs,
        dt: float = 0.1,
    ):
        if isinstance(rngs, np.random.Generator):
            rngs = [rngs]
        self.rngs = list(rngs)
        self.n_lanes = S = len(self.rngs)
        self.n_agents = N = n_agents
        self.feature_dim = feature_dim
        self.action_dim = action_dim
        self.cfg = cfg
        hidden = tuple(cfg.hidden)
        # each lane initializes its own agents from its own stream
        pols = [make_policy(feature_dim, action_dim, hidden, r, N, cfg.init_log_std) for r in self.rngs]
        crits = [make_critic(feature_dim, action_dim, hidden, r, N) for r in self.rngs]
        self.policy = GaussianPolicy(_stack([p.net for p in pols]), np.concatenate([p.log_std for p in pols]))
        self.critic = Critic(_stack([c.net for c in crits]))
        self.target: Optional[Critic] = self.critic.copy() if cfg.target_tau else None
        self.buffers = [ReplayBuffer(cfg.buffer_capacity, feature_dim, action_dim, N) for _ in range(S)]
        self.noise = [OUNoise((N, 1, action_dim), cfg.ou_theta, cfg.ou_sigma, dt) for _ in range(S)]
        self.updates = np.zeros(S, dtype=np.int64)
        self.observed = np.zeros(S, dtype=np.int64)
        self.episode_steps = np.zeros(S, dtype=np.int64)

    @property
    def E(self) -> int:
        return self.n_lanes * self.n_agents

    # -- acting ------------------------------------------------------------

    def act(self, features: np.ndarray, deterministic: bool = False, active=None) -> np.ndarray:
        """``features`` (S, N, F) -> actions (S, N, A).

        Agent ``i`` of lane ``s`` sees only ``features[s, i]``.  Inactive lanes
        draw no randomness and receive their mean action.
        """
        S, N, A = self.n_lanes, self.n_agents, self.action_dim
        f = np.asarray(features, dtype=float).reshape(self.E, 1, self.feature_dim)
        mean = mlp_forward(self.policy.net, f).reshape(S, N, A)
        if deterministic:
            return mean
        std = np.exp(self.policy.log_std).reshape(S, N, A)
        out = mean.copy()
        for s in range(S):
            if active is not None and not active[s]:
                continue
            eps = self.rngs[s].standard_normal((N, A))
            ou = self.noise[s].step(self.rngs[s]).reshape(N, A)
            out[s] = mean[s] + std[s] * eps + ou
        return out

    def reset_noise(self, lanes=None) -> None:
        """Start a new episode: clear exploration noise and the update clock."""
        for s in range(self.n_lanes) if lanes is None else lanes:
            self.noise[s].reset()
            self.episode_steps[s] = 0

    def entropy(self) -> np.ndarray:
        """Policy entropy per lane, averaged over agents."""
        return np.asarray(entropy(self.policy)).reshape(self.n_lanes, self.n_agents).mean(axis=1)

    # -- learning ----------------------------------------------------------

    def observe(self, features, actions, rewards, next_features, done, active=None) -> Optional[dict]:
        """Store one joint transition per active lane and run due updates."""
        S = self.n_lanes
        active = np.ones(S, bool) if active is None else np.asarray(active, bool)
        done = np.broadcast_to(np.asarray(done, float), (S,))
        scale = self.cfg.reward_scale
        due = np.zeros(S, bool)
        for s in np.flatnonzero(active):
            self.buffers[s].add(features[s], actions[s], scale * rewards[s], next_features[s], done[s])
            self.observed[s] += 1
            self.episode_steps[s] += 1
            # the clock counts steps within the episode, so lanes running
            # synchronous episodes fall due together
            due[s] = len(self.buffers[s]) >= max(self.cfg.warmup, 1) and self.episode_steps[s] % self.cfg.update_every == 0
        if not due.any():
            return None
        return self.update(due)

    def _batch(self, lanes_mask):
        S, N, B = self.n_lanes, self.n_agents, self.cfg.batch_size
        F, A = self.feature_dim, self.action_dim
        f = np.zeros((S, N, B, F))
        a = np.zeros((S, N, B, A))
        r = np.zeros((S, N, B))
        f2 = np.zeros((S, N, B, F))
        d = np.zeros((S, N, B))
        for s in np.flatnonzero(lanes_mask):
            fs, as_, rs, f2s, ds = self.buffers[s].sample(B, self.rngs[s])
            k = fs.shape[1]
            f[s, :, :k], a[s, :, :k], r[s, :, :k], f2[s, :, :k], d[s, :, :k] = fs, as_, rs, f2s, ds
            if k < B:  # pad by repeating so every member sees the same batch size
                reps = np.arange(B) % k
                f[s], a[s], r[s], f2[s], d[s] = fs[:, reps], as_[:, reps], rs[:, reps], f2s[:, reps], ds[:, reps]
        E = self.E
        return (
            f.reshape(E, B, F),
            a.reshape(E, B, A),
            r.reshape(E, B),
            f2.reshape(E, B, F),
            d.reshape(E, B),
        )

    def update(self, lanes_mask=None) -> dict:
        cfg = self.cfg
        S, N = self.n_lanes, self.n_agents
        lanes_mask = np.ones(S, bool) if lanes_mask is None else np.asarray(lanes_mask, bool)
        batch = self._batch(lanes_mask)
        f, a, r, f2, d = batch
        k = self.updates
        alpha = np.repeat(np.where(lanes_mask, [cfg.alpha(int(x)) for x in k], 0.0), N)
        beta = np.repeat(np.where(lanes_mask, [cfg.beta(int(x)) for x in k], 0.0), N)
        lane_rng = _LaneRng(self.rngs, lanes_mask, N) if cfg.bootstrap == "max-sample" else None
        y = td_targets(self.target or self.critic, self.policy, r, f2, d, cfg.gamma, cfg.bootstrap, lane_rng)
        grads, delta = critic_loss_grad(self.critic, f, a, y)
        grads, _ = clip_by_global_norm(grads, cfg.grad_clip, self.E)
        for p, g in zip(self.critic.net.params(), grads):
            p -= _member_lr(alpha, p.ndim) * g
        pgrads, g_ls, adv = policy_gradient(self.policy, self.critic, (f, a))
        allg = pgrads + ([g_ls] if cfg.learn_log_std else [])
        allg, _ = clip_by_global_norm(allg, cfg.grad_clip, self.E)
        for p, g in zip(self.policy.net.params(), allg[: len(pgrads)]):
            p += _member_lr(beta, p.ndim) * g
        if cfg.learn_log_std:
            self.policy.log_std = np.clip(self.policy.log_std + _member_lr(beta, 3) * allg[-1], LOG_STD_MIN, LOG_STD_MAX)
        if self.target is not None:
            tau = np.repeat(np.where(lanes_mask, cfg.target_tau, 0.0), N)
            for pt, ps in zip(self.target.net.params(), self.critic.net.params()):
                t = _member_lr(tau, pt.ndim)
                pt += t * (ps - pt)
        self.updates += lanes_mask
        # per-lane statistics, NaN for lanes that did not update
        td = np.abs(delta).reshape(S, -1).mean(axis=1)
        ad = adv.reshape(S, -1).mean(axis=1)
        return {
            "td_error": np.where(lanes_mask, td, np.nan),
            "advantage": np.where(lanes_mask, ad, np.nan),
        }

    # -- persistence -------------------------------------------------------

    def lane_nets(self, s: int):
        """Views of lane ``s``'s policy and critic as ``n_agents`` ensembles."""
        sl = slice(s * self.n_agents, (s + 1) * self.n_agents)
        pol = _slice(self.policy.net, sl)
        crit = _slice(self.critic.net, sl)
        return pol, self.policy.log_std[sl], crit

    def save(self, directory, lane: int = 0, meta: dict = None):
        meta = dict(meta or {})
        meta.update(
            n_agents=self.n_agents,
            updates=int(self.updates[lane]),
            alpha=self.cfg.alpha.to_json(),
            beta=self.cfg.beta.to_json(),
        )
        pol, log_std, crit = self.lane_nets(lane)
        nets = {"policy": pol, "critic": crit}
        if self.target is not None:
            nets["target"] = _slice(self.target.net, slice(lane * self.n_agents, (lane + 1) * self.n_agents))
        return save_checkpoint(directory, nets, {"log_std": log_std}, meta)

    def load(self, directory, lane: int = 0) -> dict:
        N = self.n_agents
        expect = {"policy": self.policy.net.sizes, "critic": self.critic.net.sizes}
        nets, arrays, meta = load_checkpoint(directory, expect)
        for name in ("policy", "critic"):
            if nets[name].ensemble != N:
                raise CheckpointError(f"{name}: checkpoint holds {nets[name].ensemble} agents, configuration has {N}")
        sl = slice(lane * N, (lane + 1) * N)
        for dst, src in ((self.policy.net, nets["policy"]), (self.critic.net, nets["critic"])):
            for p, q in zip(dst.params(), src.params()):
                if p[sl].shape != q.shape:
                    raise CheckpointError(f"parameter shape {q.shape} does not match {p[sl].shape}")
                p[sl] = q
        if "log_std" in arrays:
            if arrays["log_std"].shape != self.policy.log_std[sl].shape:
                raise CheckpointError(f"log_std shape {arrays['log_std'].shape} != {self.policy.log_std[sl].shape}")
            self.policy.log_std[sl] = arrays["log_std"]
        if self.target is not None:
            src = nets.get("target", nets["critic"])
            for p, q in zip(self.target.net.params(), src.params()):
                p[sl] = q
        self.updates[lane] = int(meta.get("updates", 0))
        return meta


class _LaneRng:
    """Draw standard normals for an (E, ...) array from per-lane streams."""

    def __init__(self, rngs, mask, n_agents):
        self.rngs, self.mask, self.N = rngs, mask, n_agents

    def standard_normal(self, shape):
        S, N = len(self.rngs), self.N
        out = np.zeros((S, N) + tuple(shape[1:]))
        for s in np.flatnonzero(self.mask):
            out[s] = self.rngs[s].standard_normal((N,) + tuple(shape[1:]))
        return out.reshape(shape)


def _stack(nets):
    first = nets[0]
    W = [np.concatenate([n.weights[k] for n in nets]) for k in range(first.n_layers)]
    b = [np.concatenate([n.biases[k] for n in nets]) for k in range(first.n_layers)]
    return MLP(list(first.sizes), W, b, sum(n.ensemble for n in nets))


def _slice(net, sl):
    return MLP(list(net.sizes), [W[sl].copy() for W in net.weights], [b[sl].copy() for b in net.biases], sl.stop - sl.start)
