"""Gaussian policies, Q-critics and their stochastic-gradient updates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .mlp import MLP, clip_by_global_norm, init_mlp, mlp_backward, mlp_forward, sgd_step
from .noise import OUNoise, StepSchedule

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
GRAD_CLIP = 10.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
GAUSS_ENTROPY = 0.5 * math.log(2.0 * math.pi * math.e)

Rate = Union[float, StepSchedule]


def _rate(lr: Rate, step: int) -> float:
    return lr(step) if isinstance(lr, StepSchedule) else float(lr)


@dataclass
class GaussianPolicy:
    net: MLP
    log_std: np.ndarray

    def __post_init__(self):
        self.log_std = np.clip(np.asarray(self.log_std, dtype=float), LOG_STD_MIN, LOG_STD_MAX)

    @property
    def action_dim(self) -> int:
        return self.net.sizes[-1]

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.net.copy(), self.log_std.copy())


@dataclass
class Critic:
    net: MLP

    def copy(self) -> "Critic":
        return Critic(self.net.copy())


def make_policy(feature_dim, action_dim, hidden, rng, ensemble=None, log_std=-0.5, out_scale=0.1) -> GaussianPolicy:
    net = init_mlp([feature_dim, *hidden, action_dim], rng, ensemble, out_scale=out_scale)
    shape = (action_dim,) if ensemble is None else (ensemble, 1, action_dim)
    return GaussianPolicy(net, np.full(shape, float(log_std)))


def make_critic(feature_dim, action_dim, hidden, rng, ensemble=None) -> Critic:
    return Critic(init_mlp([feature_dim + action_dim, *hidden, 1], rng, ensemble))


def policy_mean(policy: GaussianPolicy, features) -> np.ndarray:
    return mlp_forward(policy.net, features)


def critic_value(critic: Critic, features, actions) -> np.ndarray:
    x = np.concatenate([np.asarray(features, float), np.asarray(actions, float)], axis=-1)
    return mlp_forward(critic.net, x)[..., 0]


def gaussian_log_prob(mean, log_std, actions) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return (-0.5 * z * z - log_std - HALF_LOG_2PI).sum(axis=-1)


def policy_act(
    policy: GaussianPolicy,
    features,
    noise: Optional[OUNoise],
    rng: np.random.Generator,
    deterministic: bool = False,
):
    """Return ``(action, log_prob)``.

    Stochastic mode adds a Gaussian draw and the advanced OU state to the
    mean; ``log_prob`` is that of the Gaussian component alone.  The
    deterministic mode returns the mean and a zero log-probability.
    """
    mean = policy_mean(policy, features)
    if deterministic:
        return mean, np.zeros(mean.shape[:-1])
    eps = rng.standard_normal(mean.shape)
    action = mean + np.exp(policy.log_std) * eps
    if noise is not None:
        action = action + np.broadcast_to(noise.step(rng), mean.shape)
    logp = (-0.5 * eps * eps - policy.log_std - HALF_LOG_2PI).sum(axis=-1)
    return action, logp


def entropy(policy: GaussianPolicy, features=None) -> np.ndarray:
    """Closed-form entropy of the diagonal Gaussian (state independent)."""
    return (GAUSS_ENTROPY + policy.log_std).sum(axis=-1).squeeze()


# ---------------------------------------------------------------------------
# critic update


def td_targets(
    critic_for_target: Critic,
    policy: GaussianPolicy,
    rewards,
    next_features,
    dones,
    gamma: float,
    bootstrap: str = "mean",
    rng: Optional[np.random.Generator] = None,
    n_samples: int = 8,
) -> np.ndarray:
    if bootstrap == "mean":
        nxt = critic_value(critic_for_target, next_features, policy_mean(policy, next_features))
    elif bootstrap == "max-sample":
        mean = policy_mean(policy, next_features)
        reps = np.repeat(mean[..., None, :], n_samples, axis=-2)
        acts = reps + np.exp(policy.log_std)[..., None, :] * rng.standard_normal(reps.shape)
        acts[..., 0, :] = mean  # the mean action is always a candidate
        f = np.repeat(np.asarray(next_features, float)[..., None, :], n_samples, axis=-2)
        shp = f.shape
        if critic_for_target.net.ensemble is None:
            q = critic_value(critic_for_target, f.reshape(-1, shp[-1]), acts.reshape(-1, acts.shape[-1]))
        else:
            q = critic_value(
                critic_for_target,
                f.reshape(shp[0], -1, shp[-1]),
                acts.reshape(shp[0], -1, acts.shape[-1]),
            )
        nxt = q.reshape(shp[:-1]).max(axis=-1)
    else:
        raise ValueError(f"unknown bootstrap {bootstrap!r}")
    return rewards + gamma * (1.0 - dones) * nxt


def critic_loss_grad(critic: Critic, features, actions, targets):
    """Gradient of ``0.5 * mean((Q(b,u) - y)^2)``; returns ``(grads, y - Q)``."""
    x = np.concatenate([features, actions], axis=-1)
    q, cache = mlp_forward(critic.net, x, cache=True)
    delta = targets - q[..., 0]
    B = delta.shape[-1]
    grads, _ = mlp_backward(critic.net, cache, (-delta / B)[..., None])
    return grads, delta


def td_update(
    critic: Critic,
    batch,
    policy: GaussianPolicy,
    lr: Rate,
    gamma: float,
    step: int = 0,
    bootstrap: str = "mean",
    target: Optional[Critic] = None,
    rng: Optional[np.random.Generator] = None,
    clip: float = GRAD_CLIP,
):
    """One SGD step on the mean squared TD error; returns ``(critic, mean |delta|)``.

    The target uses ``target`` (or the critic itself) and carries no gradient.
    """
    f, a, r, f2, d = batch
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    y = td_targets(target or critic, policy, r, f2, d, gamma, bootstrap, rng)
    grads, delta = critic_loss_grad(critic, f, a, y)
    grads, _ = clip_by_global_norm(grads, clip, critic.net.ensemble)
    sgd_step(critic.net.params(), grads, _rate(lr, step))
    return critic, float(np.abs(delta).mean())


# ---------------------------------------------------------------------------
# actor update


def policy_gradient(policy: GaussianPolicy, critic, batch):
    """Gradient of ``mean(log pi(u|b) * A)`` with ``A = Q(b,u) - Q(b, mean(b))``.

    ``critic`` may be a :class:`Critic` or any callable ``q(features, actions)``.
    Returns ``(grads, log_std_grad, advantages)``; grads follow ``net.params()``.
    """
    f, a = batch[0], batch[1]
    q = critic if callable(critic) else (lambda ff, aa: critic_value(critic, ff, aa))
    mean, cache = mlp_forward(policy.net, f, cache=True)
    adv = q(f, a) - q(f, mean)
    return policy_gradient_from_advantage(policy, f, a, adv, mean, cache) + (adv,)


def policy_gradient_from_advantage(policy, f, a, adv, mean=None, cache=None):
    if cache is None:
        mean, cache = mlp_forward(policy.net, f, cache=True)
    B = adv.shape[-1]
    inv_var = np.exp(-2.0 * policy.log_std)
    diff = a - mean
    w = (adv / B)[..., None]
    g_mean = w * diff * inv_var
    grads, _ = mlp_backward(policy.net, cache, g_mean)
    g_log_std = (w * (diff * diff * inv_var - 1.0)).sum(axis=-2, keepdims=policy.log_std.ndim == 3)
    return grads, g_log_std


def policy_update(
    policy: GaussianPolicy,
    critic,
    batch,
    lr: Rate,
    step: int = 0,
    clip: float = GRAD_CLIP,
    learn_log_std: bool = True,
):
    """One ascent step; the advantage is held constant.  Returns ``(policy, mean A)``."""
    grads, g_log_std, adv = policy_gradient(policy, critic, batch)
    ens = policy.net.ensemble
    allg = grads + ([g_log_std] if learn_log_std else [])
    allg, _ = clip_by_global_norm(allg, clip, ens)
    eta = _rate(lr, step)
    sgd_step(policy.net.params(), allg[: len(grads)], eta, ascend=True)
    if learn_log_std:
        policy.log_std = np.clip(policy.log_std + eta * allg[-1], LOG_STD_MIN, LOG_STD_MAX)
    return policy, float(np.mean(adv))


def polyak_update(target, source, tau: float) -> None:
    for pt, ps in zip(target.net.params(), source.net.params()):
        pt *= 1.0 - tau
        pt += tau * ps
