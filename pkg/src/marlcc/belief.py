"""Belief maintenance: particle filter, exact discrete Bayes filter, consensus fusion.

Particle beliefs may carry leading batch axes (one belief per agent):
``particles`` has shape ``(..., N_p, n)`` and ``weights`` ``(..., N_p)``.
All arithmetic on weights is done in log space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .dynamics import AffineSystem, rk4_step
from .errors import FusionSupportError, ImpossibleObservationError, ModelConfigurationError

log = logging.getLogger(__name__)

RngLike = Union[np.random.Generator, Sequence[np.random.Generator]]


def logsumexp(a: np.ndarray, axis=-1, keepdims=False) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


@dataclass
class ParticleBelief:
    particles: np.ndarray
    weights: np.ndarray
    degenerate: Union[bool, np.ndarray] = False

    @property
    def n_particles(self) -> int:
        return self.weights.shape[-1]

    def ess(self) -> np.ndarray:
        return 1.0 / np.sum(self.weights**2, axis=-1)

    def copy(self) -> "ParticleBelief":
        return ParticleBelief(self.particles.copy(), self.weights.copy(), np.copy(self.degenerate))

    def __getitem__(self, i) -> "ParticleBelief":
        deg = self.degenerate[i] if np.ndim(self.degenerate) else self.degenerate
        return ParticleBelief(self.particles[i], self.weights[i], deg)


def gaussian_belief(mean, cov, n_particles: int, rng: np.random.Generator) -> ParticleBelief:
    mean = np.asarray(mean, dtype=float)
    L = _sqrt_psd(np.asarray(cov, dtype=float))
    parts = mean + rng.standard_normal((n_particles, mean.size)) @ L.T
    return ParticleBelief(parts, np.full(n_particles, 1.0 / n_particles))


@dataclass
class DiscreteBelief:
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.support = np.asarray(self.support)
        self.probs = np.asarray(self.probs, dtype=float)
        if np.any(self.probs < 0):
            raise ValueError("probabilities must be nonnegative")


@dataclass
class ObservationModel:
    """``z = h(x) + nu`` with ``nu ~ N(0, cov)``."""

    h: Callable[[np.ndarray], np.ndarray]
    cov: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)
    _chol_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if not np.allclose(self.cov, self.cov.T):
            raise ModelConfigurationError("observation covariance is not symmetric")
        try:
            self._chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise ModelConfigurationError("observation covariance is not positive definite") from exc
        self._chol_inv = np.linalg.inv(self._chol)

    def log_likelihood(self, z: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Unnormalized Gaussian log-likelihood of ``z`` for states ``x``.

        ``z`` is broadcast against the particle axis, so ``z[..., p]`` pairs
        with ``x[..., N_p, n]``.
        """
        resid = np.asarray(z, dtype=float)[..., None, :] - self.h(x)
        white = resid @ self._chol_inv.T
        return -0.5 * np.sum(white**2, axis=-1)

    def sample(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        hx = np.asarray(self.h(x), dtype=float)
        return hx + rng.standard_normal(hx.shape) @ self._chol.T


def _sqrt_psd(cov: np.ndarray) -> np.ndarray:
    """Square-root factor of a symmetric positive semi-definite matrix."""
    cov = np.atleast_2d(cov)
    if not np.allclose(cov, cov.T):
        raise ModelConfigurationError("process noise covariance is not symmetric")
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        lam, V = np.linalg.eigh(cov)
        if lam.min() < -1e-12 * max(1.0, lam.max()):
            raise ModelConfigurationError("process noise covariance is not positive semi-definite")
        return V * np.sqrt(np.clip(lam, 0.0, None))


def _normals(rng: RngLike, shape) -> np.ndarray:
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    rngs = list(rng)
    return np.stack([r.standard_normal(shape[1:]) for r in rngs])


# ---------------------------------------------------------------------------
# particle filter steps


def predict(
    b: ParticleBelief,
    system: AffineSystem,
    u: np.ndarray,
    dt: float,
    process_noise: np.ndarray,
    rng: RngLike,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> ParticleBelief:
    """Advance every particle by one RK4 step and add Gaussian process noise.

    ``u`` may carry the same leading batch axes as the belief; ``rng`` may be
    a sequence with one generator per leading batch element.
    """
    L = _sqrt_psd(np.asarray(process_noise, dtype=float))
    u = np.asarray(u, dtype=float)
    if b.particles.ndim > 2 and u.ndim > 1:
        u = u[..., None, :]
    x = rk4_step(system, b.particles, u, dt)
    if np.any(L):
        x = x + _normals(rng, x.shape) @ L.T
    if project is not None:
        x = project(x)
    return ParticleBelief(x, b.weights.copy())


def reweight(b: ParticleBelief, loglik: np.ndarray) -> ParticleBelief:
    """Multiply weights by ``exp(loglik)`` and renormalize.

    A belief whose total posterior mass vanishes is reset to uniform weights
    and flagged as degenerate.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        logw = np.log(b.weights) + loglik
    logw = np.where(np.isnan(logw), -np.inf, logw)
    norm = logsumexp(logw, axis=-1, keepdims=True)
    bad = ~np.isfinite(norm)
    with np.errstate(invalid="ignore"):
        w = np.exp(logw - np.where(bad, 0.0, norm))
    if np.any(bad):
        w = np.where(bad, 1.0 / b.n_particles, w)
        log.warning("particle weights degenerated; reset to uniform")
    degenerate = bad[..., 0] if np.ndim(bad) > 1 else bool(bad[0])
    return ParticleBelief(b.particles, w, degenerate)


def update(b: ParticleBelief, z: np.ndarray, model: ObservationModel) -> ParticleBelief:
    """Bayes update with the Gaussian observation likelihood."""
    return reweight(b, model.log_likelihood(z, b.particles))


def systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)


def resample(b: ParticleBelief, rng: RngLike, threshold: float = 0.5) -> ParticleBelief:
    """Systematic resampling when ESS drops below ``threshold * N_p``."""
    n = b.n_particles
    if b.weights.ndim == 1:
        if b.ess() >= threshold * n:
            return b
        idx = systematic_indices(b.weights, rng if isinstance(rng, np.random.Generator) else rng[0])
        return ParticleBelief(b.particles[idx], np.full(n, 1.0 / n), b.degenerate)
    rngs = [rng] * len(b.weights) if isinstance(rng, np.random.Generator) else list(rng)
    flat_p = b.particles.reshape((-1,) + b.particles.shape[-2:])
    flat_w = b.weights.reshape(-1, n)
    ess = 1.0 / np.sum(flat_w**2, axis=-1)
    P, W = flat_p.copy(), flat_w.copy()
    for k in np.flatnonzero(ess < threshold * n):
        idx = systematic_indices(flat_w[k], rngs[k])
        P[k] = flat_p[k][idx]
        W[k] = 1.0 / n
    return ParticleBelief(P.reshape(b.particles.shape), W.reshape(b.weights.shape), b.degenerate)


def belief_features(b: ParticleBelief) -> np.ndarray:
    """Weighted mean followed by weighted (population) standard deviation."""
    w = b.weights[..., None]
    mean = np.sum(w * b.particles, axis=-2)
    var = np.sum(w * (b.particles - mean[..., None, :]) ** 2, axis=-2)
    return np.concatenate([mean, np.sqrt(np.maximum(var, 0.0))], axis=-1)


def histogram(b: ParticleBelief, edges: np.ndarray, dim: int = 0) -> np.ndarray:
    """Project particle weights onto the cells defined by ``edges`` along ``dim``."""
    k = len(edges) - 1
    cell = np.clip(np.searchsorted(edges, b.particles[..., dim], side="right") - 1, 0, k - 1)
    return np.bincount(cell, weights=b.weights, minlength=k)


def apply_grid_prior(b: ParticleBelief, prior: DiscreteBelief, edges: np.ndarray, dim: int = 0) -> ParticleBelief:
    """Reweight particles by the probability a grid belief gives their cell."""
    k = len(edges) - 1
    cell = np.clip(np.searchsorted(edges, b.particles[..., dim], side="right") - 1, 0, k - 1)
    with np.errstate(divide="ignore"):
        return reweight(b, np.log(prior.probs[cell]))


# ---------------------------------------------------------------------------
# exact oracle and fusion


def exact_bayes_filter(transition, emission, prior, observations) -> List[DiscreteBelief]:
    """Forward filter on a finite HMM: predict with ``transition`` then condition on each observation."""
    T = np.asarray(transition, dtype=float)
    E = np.asarray(emission, dtype=float)
    b = np.asarray(prior, dtype=float)
    if not np.allclose(T.sum(axis=1), 1.0) or np.any(T < 0):
        raise ValueError("transition matrix must be row-stochastic")
    if not np.allclose(E.sum(axis=1), 1.0) or np.any(E < 0):
        raise ValueError("emission rows must be distributions")
    if not np.isclose(b.sum(), 1.0) or np.any(b < 0):
        raise ValueError("prior must be a distribution")
    support = np.arange(len(b))
    out = []
    for t, z in enumerate(observations):
        post = (b @ T) * E[:, z]
        total = post.sum()
        if total <= 0.0:
            raise ImpossibleObservationError(f"observation {z!r} at step {t} has zero likelihood")
        b = post / total
        out.append(DiscreteBelief(support, b))
    return out


def fuse_log(log_beliefs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted geometric pooling in log space, returns normalized log-probabilities.

    Components with zero weight are ignored; a point that any weighted
    component excludes (log-prob ``-inf``) stays excluded.
    """
    L = np.asarray(log_beliefs, dtype=float)
    w = np.asarray(weights, dtype=float)
    used = w > 0
    pooled = np.sum(w[used][:, None] * L[used], axis=0)
    return pooled - logsumexp(pooled)


def fuse(beliefs: Sequence[DiscreteBelief], weights: Sequence[float]) -> DiscreteBelief:
    """Consensus fusion ``b_new ∝ prod_j b_j ** w_j`` over self and neighbors."""
    if len(beliefs) != len(weights):
        raise ValueError("need one weight per belief")
    support = beliefs[0].support
    for b in beliefs[1:]:
        if b.support.shape != support.shape or not np.array_equal(b.support, support):
            raise FusionSupportError("beliefs do not share a support")
    with np.errstate(divide="ignore"):
        L = np.log(np.stack([b.probs for b in beliefs]))
    return DiscreteBelief(support, np.exp(fuse_log(L, weights)))


def consensus_round(log_beliefs: np.ndarray, W: np.ndarray) -> np.ndarray:
    """One synchronous fusion round for every agent (rows of ``log_beliefs``)."""
    return np.stack([fuse_log(log_beliefs, W[i]) for i in range(len(W))])
