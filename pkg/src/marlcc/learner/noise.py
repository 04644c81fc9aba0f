"""Exploration noise and step-size schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OUNoise:
    """Euler-discretized Ornstein-Uhlenbeck process around zero."""

    shape: tuple
    theta: float = 0.15
    sigma: float = 0.2
    dt: float = 0.1
    state: np.ndarray = field(default=None)

    def __post_init__(self):
        self.shape = tuple(np.atleast_1d(self.shape).tolist()) if not isinstance(self.shape, tuple) else self.shape
        if self.state is None:
            self.state = np.zeros(self.shape)

    def reset(self) -> None:
        self.state = np.zeros(self.shape)

    def step(self, rng: np.random.Generator) -> np.ndarray:
        drift = -self.theta * self.state * self.dt
        if self.sigma:
            diffusion = self.sigma * np.sqrt(self.dt) * rng.standard_normal(self.shape)
        else:
            diffusion = 0.0
        self.state = self.state + drift + diffusion
        return self.state

    def stationary_std(self) -> float:
        """Exact stationary std of the discretized recursion."""
        return self.sigma * np.sqrt(self.dt / (1.0 - (1.0 - self.theta * self.dt) ** 2))


@dataclass(frozen=True)
class StepSchedule:
    """``constant``: ``alpha_k = a``; ``robbins-monro``: ``alpha_k = a / (b + k)``."""

    kind: str = "constant"
    a: float = 1e-3
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "robbins-monro"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.a > 0:
            raise ValueError("schedule scale must be positive")
        # a/(b+k) sums to infinity while its squares converge, provided b > 0
        if self.kind == "robbins-monro" and not self.b > 0:
            raise ValueError("robbins-monro offset must be positive")

    def __call__(self, k: int) -> float:
        if self.kind == "constant":
            return self.a
        return self.a / (self.b + k)

    def to_json(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b}

    @classmethod
    def from_json(cls, d: dict) -> "StepSchedule":
        return cls(d["kind"], float(d["a"]), float(d.get("b", 1.0)))
