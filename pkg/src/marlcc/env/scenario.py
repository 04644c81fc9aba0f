"""Scenario geometry, reward weights and initial placement."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from ..errors import PlacementError

SCENARIOS = ("platoon", "intersection", "lane-merge")
PLACEMENT_ATTEMPTS = 100


@dataclass
class RewardSpec:
    """Per-agent cost weights; rewards are the negated costs plus bonuses.

    Fuel, effort, spacing, speed, lateral and gate terms are rates per
    second and are multiplied by ``dt``; the safety term, bonuses and the
    collision penalty are charged per tick.  Fuel rate is
    ``rho(v) = c0 + c1 v + c2 v^2``.

    Spacing and lateral errors are evaluated on a short constant-velocity
    look-ahead so that they respond to the current acceleration and steering
    within a single tick.
    """

    c0: float = 0.1
    c1: float = 0.0
    c2: float = 0.01
    effort_weight: float = 0.01  # times a^2 per second
    yaw_effort_weight: float = 0.5  # times the executed yaw rate squared, per second
    d_min: float = 5.0
    safety_weight: float = 1.0
    headway: float = 20.0
    headway_weight: float = 0.05
    headway_lookahead: float = 1.0  # s; spacing error uses the gap predicted this far ahead
    cruise_speed: float = 10.0
    speed_weight: float = 0.02
    lateral_weight: float = 0.05
    lateral_lookahead: float = 1.0  # s; lateral error uses the offset predicted this far ahead
    collision_radius: float = 2.0
    collision_penalty: float = 1000.0
    throughput_bonus: float = 10.0  # intersection: once per vehicle clearing the crossing
    merge_bonus: float = 10.0  # lane-merge: once per ramp vehicle reaching the main lane
    gate_weight: float = 1.0  # lane-merge: per metre of lateral offset past the gate, per second

    def __post_init__(self):
        if not self.d_min > 0:
            raise ValueError("d_min must be positive")
        for k, v in vars(self).items():
            if not np.isfinite(v):
                raise ValueError(f"reward weight {k} must be finite")


@dataclass
class ScenarioConfig:
    kind: str = "platoon"
    n_agents: int = 3
    horizon: int = 500
    dt: float = 0.1
    seed: int = 0
    spacing: float = 20.0
    spacing_jitter: float = 1.0
    origin: Tuple[float, float] = (0.0, 0.0)
    lane_width: float = 3.5
    approach_distance: float = 40.0  # intersection: distance of the first vehicle from the crossing
    merge_gate: float = 150.0  # lane-merge: ramp ends this far ahead of the origin
    v0_low: float = 0.0
    v0_high: float = 10.0
    wheelbase: float = 2.5
    v_max: float = 15.0
    a_min: float = -5.0
    a_max: float = 3.0
    delta_max: float = 0.5
    comm_radius: float = 100.0
    sensing_radius: Optional[float] = None  # defaults to comm_radius / 2
    process_std: Tuple[float, float, float, float] = (0.02, 0.02, 0.05, 0.002)
    obs_std: Tuple[float, float, float, float] = (0.5, 0.5, 0.2, 0.02)
    range_std: float = 0.3
    bearing_std: float = 0.01
    reward: RewardSpec = field(default_factory=RewardSpec)

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.kind!r}; expected one of {SCENARIOS}")
        if self.n_agents < 1:
            raise ValueError("n_agents must be at least 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if not self.v0_low <= self.v0_high:
            raise ValueError("v0_low must not exceed v0_high")
        if isinstance(self.reward, dict):
            self.reward = RewardSpec(**self.reward)

    @property
    def sensing(self) -> float:
        return self.comm_radius / 2.0 if self.sensing_radius is None else self.sensing_radius


@dataclass
class Layout:
    """Static per-agent road assignment."""

    lane_heading: np.ndarray  # (N,) travel direction of each agent's target lane
    lane_point: np.ndarray  # (N, 2) a point on the target lane centre line
    predecessor: np.ndarray  # (N,) index of the vehicle to follow, -1 for none
    on_ramp: np.ndarray  # (N,) bool, lane-merge ramp vehicles

    def along(self, pos: np.ndarray) -> np.ndarray:
        """Signed distance along each agent's lane, ``pos`` shaped (..., N, 2)."""
        c, s = np.cos(self.lane_heading), np.sin(self.lane_heading)
        d = pos - self.lane_point
        return c * d[..., 0] + s * d[..., 1]

    def lateral(self, pos: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.lane_heading), np.sin(self.lane_heading)
        d = pos - self.lane_point
        return -s * d[..., 0] + c * d[..., 1]


def make_layout(cfg: ScenarioConfig) -> Layout:
    N = cfg.n_agents
    ox, oy = cfg.origin
    heading = np.zeros(N)
    point = np.tile([ox, oy], (N, 1)).astype(float)
    pred = np.arange(N) - 1
    ramp = np.zeros(N, bool)
    if cfg.kind == "intersection":
        # even agents travel east along y = oy, odd agents north along x = ox
        heading[1::2] = np.pi / 2
        pred = np.where(np.arange(N) >= 2, np.arange(N) - 2, -1)
    elif cfg.kind == "lane-merge":
        ramp[1::2] = True
    return Layout(heading, point, pred, ramp)


def nominal_positions(cfg: ScenarioConfig, layout: Layout) -> np.ndarray:
    N = cfg.n_agents
    ox, oy = cfg.origin
    pos = np.zeros((N, 2))
    if cfg.kind == "platoon":
        pos[:, 0] = ox - cfg.spacing * np.arange(N)
        pos[:, 1] = oy
    elif cfg.kind == "intersection":
        k = np.arange(N) // 2
        back = cfg.approach_distance + cfg.spacing * k
        east = np.arange(N) % 2 == 0
        pos[:, 0] = np.where(east, ox - back, ox)
        pos[:, 1] = np.where(east, oy, oy - back)
    else:
        pos[:, 0] = ox - 0.5 * cfg.spacing * np.arange(N)
        pos[:, 1] = np.where(layout.on_ramp, oy - cfg.lane_width, oy)
    return pos


def initial_states(cfg: ScenarioConfig, layout: Layout, rng: np.random.Generator) -> np.ndarray:
    """Sample ``(N, 4)`` initial states; jittered placements are redrawn until
    every pair is at least ``d_min`` apart."""
    N = cfg.n_agents
    base = nominal_positions(cfg, layout)
    d_min = cfg.reward.d_min
    c, s = np.cos(layout.lane_heading), np.sin(layout.lane_heading)
    for _ in range(PLACEMENT_ATTEMPTS):
        jit = rng.uniform(-cfg.spacing_jitter, cfg.spacing_jitter, N) if cfg.spacing_jitter else np.zeros(N)
        jit[0] = 0.0  # the first vehicle sits at the configured origin
        pos = base + jit[:, None] * np.stack([c, s], axis=-1)
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        dist[np.arange(N), np.arange(N)] = np.inf
        if N == 1 or dist.min() >= d_min:
            v = rng.uniform(cfg.v0_low, cfg.v0_high, N)
            return np.column_stack([pos, v, layout.lane_heading])
    raise PlacementError(
        f"could not place {N} vehicles at least {d_min} m apart after {PLACEMENT_ATTEMPTS} attempts"
    )
