"""Ring-buffer experience replay, optionally with one buffer per agent."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class Transition:
    features: np.ndarray
    action: np.ndarray
    reward: float
    next_features: np.ndarray
    done: bool

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.features))
            and np.all(np.isfinite(self.action))
            and np.isfinite(self.reward)
            and np.all(np.isfinite(self.next_features))
        )


class ReplayBuffer:
    """Fixed-capacity FIFO store.

    With ``n_agents`` set, every array gains a leading agent axis and all
    agents are written and sampled in lockstep (each agent reads only its own
    slice).
    """

    def __init__(self, capacity: int, feature_dim: int, action_dim: int, n_agents: Optional[int] = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.n_agents = n_agents
        lead = () if n_agents is None else (n_agents,)
        self.features = np.zeros(lead + (capacity, feature_dim))
        self.actions = np.zeros(lead + (capacity, action_dim))
        self.rewards = np.zeros(lead + (capacity,))
        self.next_features = np.zeros(lead + (capacity, feature_dim))
        self.dones = np.zeros(lead + (capacity,))
        self.size = 0
        self.head = 0  # slot of the next write
        self.total = 0

    def __len__(self):
        return self.size

    def add(self, features, action, reward, next_features, done) -> None:
        i = self.head
        ax = (slice(None), i) if self.n_agents is not None else (i,)
        self.features[ax] = features
        self.actions[ax] = action
        self.rewards[ax] = reward
        self.next_features[ax] = next_features
        self.dones[ax] = done
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total += 1

    def push(self, t: Transition) -> None:
        self.add(t.features, t.action, t.reward, t.next_features, float(t.done))

    def _order(self) -> np.ndarray:
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.head + np.arange(self.capacity)) % self.capacity

    def _gather(self, idx):
        if self.n_agents is None:
            return (self.features[idx], self.actions[idx], self.rewards[idx], self.next_features[idx], self.dones[idx])
        return (
            self.features[:, idx],
            self.actions[:, idx],
            self.rewards[:, idx],
            self.next_features[:, idx],
            self.dones[:, idx],
        )

    def contents(self):
        """All stored records, oldest first."""
        return self._gather(self._order())

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform sample without replacement inside the batch."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        k = min(int(batch_size), self.size)
        idx = rng.choice(self.size, k, replace=False)
        return self._gather(idx)
