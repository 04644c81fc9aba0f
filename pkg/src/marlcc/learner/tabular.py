"""Exact tabular dynamic programming used as a reference for the learners."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TABULAR_CAP = 50


@dataclass
class TabularMDP:
    P: np.ndarray  # (S, A, S) transition probabilities
    R: np.ndarray  # (S, A) expected rewards
    gamma: float

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        S, A, S2 = self.P.shape
        if S != S2 or self.R.shape != (S, A):
            raise ValueError("inconsistent MDP shapes")
        if S > TABULAR_CAP or A > TABULAR_CAP:
            raise ValueError(f"tabular MDPs are limited to {TABULAR_CAP} states and actions")
        if not np.allclose(self.P.sum(axis=-1), 1.0):
            raise ValueError("transition rows must sum to one")


def q_backup(mdp: TabularMDP, V) -> np.ndarray:
    return mdp.R + mdp.gamma * mdp.P @ np.asarray(V, dtype=float)


def bellman_operator_oracle(mdp: TabularMDP, V) -> np.ndarray:
    """``(TV)(s) = max_a [R(s,a) + gamma * sum_s' P(s'|s,a) V(s')]``."""
    return q_backup(mdp, V).max(axis=1)


def value_iteration(mdp: TabularMDP, tol: float = 1e-13, max_iter: int = 100_000):
    V = np.zeros(mdp.P.shape[0])
    for _ in range(max_iter):
        nxt = bellman_operator_oracle(mdp, V)
        if np.max(np.abs(nxt - V)) < tol:
            V = nxt
            break
        V = nxt
    return V, q_backup(mdp, V)


def random_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator) -> TabularMDP:
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.normal(size=(n_states, n_actions))
    return TabularMDP(P, R, gamma)
