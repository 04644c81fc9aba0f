"""Control-affine vehicle models, RK4 integration and feedback linearization.

Systems are described as ``xdot = f(x) + g(x) u`` with output ``y = h(x)``.
Evaluators broadcast over leading axes, so a batch of states of shape
``(..., n)`` can be pushed through :func:`rk4_step` in one call (the particle
filter relies on this).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import (
    IntegrationError,
    OrderLimitError,
    RelativeDegreeError,
    SingularDecouplingError,
)

Array = np.ndarray

K_MAX = 4
EPS_RELATIVE_DEGREE = 1e-8
KAPPA_MAX = 1e6
FD_STEP = 1e-6
# differences taken of an already finite-differenced function use a wider
# five-point stencil so inner round-off does not swamp the result
FD_NESTED_STEP = 1e-3


@dataclass(frozen=True)
class AffineSystem:
    """``xdot = f(x) + g(x) u``, ``y = h(x)`` with optional analytic Jacobians."""

    state_dim: int
    input_dim: int
    output_dim: int
    drift: Callable[[Array], Array]
    input_map: Callable[[Array], Array]
    output: Callable[[Array], Array]
    drift_jacobian: Optional[Callable[[Array], Array]] = None
    output_jacobian: Optional[Callable[[Array], Array]] = None
    input_low: Optional[Array] = None
    input_high: Optional[Array] = None
    name: str = "system"

    def vector_field(self, x: Array, u: Array) -> Array:
        g = self.input_map(x)
        return self.drift(x) + np.einsum("...ij,...j->...i", g, u)

    def with_output(self, output, output_jacobian=None, output_dim=None, input_columns=None, name=None):
        """Copy of the system with a different output map and optionally a column subset of g."""
        g = self.input_map
        lo, hi = self.input_low, self.input_high
        m = self.input_dim
        if input_columns is not None:
            cols = list(input_columns)
            g = lambda x, _g=self.input_map, _c=cols: _g(x)[..., _c]
            lo = None if lo is None else np.asarray(lo)[cols]
            hi = None if hi is None else np.asarray(hi)[cols]
            m = len(cols)
        probe = np.asarray(output(np.zeros(self.state_dim)))
        return AffineSystem(
            state_dim=self.state_dim,
            input_dim=m,
            output_dim=output_dim if output_dim is not None else int(probe.size),
            drift=self.drift,
            input_map=g,
            output=output,
            drift_jacobian=self.drift_jacobian,
            output_jacobian=output_jacobian,
            input_low=lo,
            input_high=hi,
            name=name or self.name,
        )


@dataclass
class VehicleState:
    position: Array
    velocity: float
    heading: float
    yaw_rate: float = 0.0

    def as_vector(self) -> Array:
        return np.array([self.position[0], self.position[1], self.velocity, self.heading])

    @classmethod
    def from_vector(cls, x: Array, yaw_rate: float = 0.0) -> "VehicleState":
        return cls(np.array(x[:2], dtype=float), float(x[2]), float(x[3]), float(yaw_rate))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_vector())) and np.isfinite(self.yaw_rate))


@dataclass
class ControlInput:
    acceleration: float
    steering: float

    def clamped(self, a_min: float, a_max: float, delta_max: float) -> "ControlInput":
        return ControlInput(
            float(np.clip(self.acceleration, a_min, a_max)),
            float(np.clip(self.steering, -delta_max, delta_max)),
        )


@dataclass
class LinearizationResult:
    alpha: Array
    beta: Array
    relative_degree: int
    condition: float
    singular: bool


@dataclass
class FeedbackResult:
    u: Array
    saturated: bool
    linearization: LinearizationResult


# ---------------------------------------------------------------------------
# integration


def rk4_step(system: AffineSystem, x: Array, u: Array, dt: float) -> Array:
    """One classical fourth-order Runge-Kutta step with the input held constant."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)

    def stage(xs):
        k = system.vector_field(xs, u)
        if not np.all(np.isfinite(k)):
            bad = np.argwhere(~np.isfinite(np.reshape(k, (-1, system.state_dim))))[0, 1]
            raise IntegrationError(
                f"{system.name}: vector field produced a non-finite value in state component {bad}"
            )
        return k

    k1 = stage(x)
    k2 = stage(x + 0.5 * dt * k1)
    k3 = stage(x + 0.5 * dt * k2)
    k4 = stage(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    w = np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)
    return w if np.ndim(w) else float(w)


def project_vehicle_state(x: Array, v_max: float) -> Array:
    """Clamp speed to [0, v_max] and wrap heading. Works on ``(..., 4)`` arrays."""
    x = np.array(x, dtype=float, copy=True)
    x[..., 2] = np.clip(x[..., 2], 0.0, v_max)
    x[..., 3] = np.pi - np.mod(np.pi - x[..., 3], 2.0 * np.pi)
    return x


# ---------------------------------------------------------------------------
# Lie derivatives


def _field(system: AffineSystem, along: Union[str, int]) -> Callable[[Array], Array]:
    if along == "f":
        return system.drift
    if isinstance(along, (int, np.integer)):
        j = int(along)
    elif isinstance(along, str) and along.startswith("g"):
        j = int(along[1:]) if len(along) > 1 else 0
    else:
        raise ValueError(f"unknown vector field selector {along!r}")
    if not 0 <= j < system.input_dim:
        raise ValueError(f"input column {j} out of range for m={system.input_dim}")
    return lambda x: system.input_map(x)[..., :, j]


def _fd_jacobian(fun: Callable[[Array], Array], x: Array, nested: bool = False) -> Array:
    """Central-difference Jacobian, shape (p, n)."""
    n = x.size
    cols = []
    for i in range(n):
        e = np.zeros(n)
        if not nested:
            e[i] = FD_STEP * max(1.0, abs(x[i]))
            d = (np.atleast_1d(fun(x + e)) - np.atleast_1d(fun(x - e))) / (2.0 * e[i])
        else:
            e[i] = FD_NESTED_STEP * max(1.0, abs(x[i]))
            d = (
                8.0 * (np.atleast_1d(fun(x + e)) - np.atleast_1d(fun(x - e)))
                - (np.atleast_1d(fun(x + 2 * e)) - np.atleast_1d(fun(x - 2 * e)))
            ) / (12.0 * e[i])
        cols.append(d)
    return np.stack(cols, axis=-1)


def _directional(fun: Callable[[Array], Array], x: Array, direction: Array) -> Array:
    """Central difference of ``fun`` along ``direction`` (not normalized)."""
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:
        return np.zeros_like(np.asarray(fun(x), dtype=float))
    h = FD_STEP * max(1.0, float(np.max(np.abs(x))))
    d = direction / norm
    return (np.asarray(fun(x + h * d)) - np.asarray(fun(x - h * d))) / (2.0 * h) * norm


def _lie_chain(system: AffineSystem, fields: Sequence[Callable], analytic: bool):
    """Return ``(phi, nest)``: ``phi(x) = L_{v_k} ... L_{v_1} h(x)`` and its FD nesting depth.

    ``fields[0]`` is applied first. ``fields[0]`` may be the drift, in which
    case the analytic path can also produce an exact gradient of the first
    level from ``dh`` and ``df``.
    """
    h = lambda x: np.atleast_1d(system.output(x))
    use_dh = analytic and system.output_jacobian is not None
    dh = (lambda x: np.atleast_2d(system.output_jacobian(x))) if use_dh else None

    def grad(level, phi, nest, x):
        if level == 0 and use_dh:
            return dh(x)
        if level == 1 and use_dh and fields[0] is system.drift and system.drift_jacobian is not None:
            # d(dh f)/dx = dh df + D(dh)[f]; the second term vanishes for affine outputs
            return dh(x) @ system.drift_jacobian(x) + _directional(dh, x, system.drift(x))
        return _fd_jacobian(phi, x, nested=nest > 0)

    phi, nest = h, 0
    for level, v in enumerate(fields):
        inner_phi, inner_nest = phi, nest

        def phi(x, _p=inner_phi, _n=inner_nest, _v=v, _lvl=level):
            return grad(_lvl, _p, _n, x) @ _v(x)

        exact = (level == 0 and use_dh) or (
            level == 1 and use_dh and fields[0] is system.drift and system.drift_jacobian is not None
        )
        nest = inner_nest if exact else inner_nest + 1
    return phi, nest


def lie_derivative(
    system: AffineSystem,
    along: Union[str, int],
    x: Array,
    order: int = 1,
    *,
    f_order: int = 0,
    analytic: bool = True,
    k_max: int = K_MAX,
) -> Array:
    """``L_v^order L_f^f_order h(x)`` for each output, shape ``(p,)``.

    ``along`` selects the vector field: ``"f"`` for the drift, ``"g"``/``"gj"``
    or an integer ``j`` for input column ``j``. With ``f_order=r-1`` and
    ``along="gj"`` this gives the decoupling entries ``L_gj L_f^{r-1} h``.
    Analytic Jacobians are used when present and ``analytic`` is true;
    otherwise everything is nested central differences.
    """
    if order < 1 or f_order < 0:
        raise ValueError("order must be >= 1 and f_order >= 0")
    if order + f_order > k_max:
        raise OrderLimitError(f"total Lie derivative order {order + f_order} exceeds k_max={k_max}")
    x = np.asarray(x, dtype=float)
    v = _field(system, along)
    fields = [system.drift] * f_order + [v] * order
    phi, _ = _lie_chain(system, fields, analytic)
    return np.atleast_1d(phi(x))


def decoupling_matrix(system: AffineSystem, x: Array, r: int, analytic: bool = True) -> Array:
    """``L_g L_f^{r-1} h(x)`` as a ``(p, m)`` matrix."""
    cols = [lie_derivative(system, j, x, 1, f_order=r - 1, analytic=analytic) for j in range(system.input_dim)]
    return np.stack(cols, axis=-1)


def relative_degree(system: AffineSystem, x: Array, eps: float = EPS_RELATIVE_DEGREE, analytic: bool = True) -> int:
    """Smallest ``r`` with a non-vanishing decoupling matrix.

    The threshold is taken relative to ``||dh/dx||`` so that rescaling the
    output does not move the answer.
    """
    x = np.asarray(x, dtype=float)
    if system.output_jacobian is not None and analytic:
        dh = np.atleast_2d(system.output_jacobian(x))
    else:
        dh = _fd_jacobian(lambda z: np.atleast_1d(system.output(z)), x)
    scale = float(np.linalg.norm(dh))
    if scale > 0.0:
        for r in range(1, min(system.state_dim, K_MAX) + 1):
            beta = decoupling_matrix(system, x, r, analytic)
            if np.linalg.norm(beta) > eps * scale:
                return r
    raise RelativeDegreeError(f"{system.name}: input does not reach the output within {system.state_dim} derivatives")


def linearize(system: AffineSystem, x: Array, kappa_max: float = KAPPA_MAX, analytic: bool = True) -> LinearizationResult:
    """Drift compensation ``alpha`` and decoupling matrix ``beta`` at ``x``."""
    x = np.asarray(x, dtype=float)
    try:
        r = relative_degree(system, x, analytic=analytic)
    except RelativeDegreeError:
        p, m = system.output_dim, system.input_dim
        return LinearizationResult(np.zeros(p), np.zeros((p, m)), 0, np.inf, True)
    alpha = lie_derivative(system, "f", x, r, analytic=analytic)
    beta = decoupling_matrix(system, x, r, analytic)
    if beta.shape[0] != beta.shape[1]:
        raise ValueError(f"feedback linearization needs a square decoupling matrix, got {beta.shape}")
    with np.errstate(all="ignore"):
        cond = float(np.linalg.cond(beta))
    singular = not np.isfinite(cond) or cond > kappa_max
    return LinearizationResult(alpha, beta, r, cond, singular)


def feedback_linearize(system: AffineSystem, x: Array, v: Array, kappa_max: float = KAPPA_MAX, analytic: bool = True) -> FeedbackResult:
    """``u = beta(x)^-1 (v - alpha(x))``, clamped to the system's input bounds."""
    lin = linearize(system, x, kappa_max, analytic)
    if lin.singular:
        raise SingularDecouplingError(
            f"{system.name}: decoupling matrix singular (condition number {lin.condition:.3g})"
        )
    v = np.atleast_1d(np.asarray(v, dtype=float))
    u = np.linalg.solve(lin.beta, v - lin.alpha)
    clamped = clamp_input(system, u)
    return FeedbackResult(clamped, bool(np.any(clamped != u)), lin)


def clamp_input(system: AffineSystem, u: Array) -> Array:
    lo = -np.inf if system.input_low is None else system.input_low
    hi = np.inf if system.input_high is None else system.input_high
    return np.clip(u, lo, hi)


# ---------------------------------------------------------------------------
# concrete models


def double_integrator(output_index: int = 0) -> AffineSystem:
    """``x1' = x2, x2' = u`` with ``y = x[output_index]``."""
    c = np.zeros(2)
    c[output_index] = 1.0
    return AffineSystem(
        state_dim=2,
        input_dim=1,
        output_dim=1,
        drift=lambda x: np.stack([x[..., 1], np.zeros_like(x[..., 0])], axis=-1),
        input_map=lambda x: np.broadcast_to(np.array([[0.0], [1.0]]), np.shape(x)[:-1] + (2, 1)),
        output=lambda x: x[..., output_index : output_index + 1],
        drift_jacobian=lambda x: np.array([[0.0, 1.0], [0.0, 0.0]]),
        output_jacobian=lambda x: c[None, :],
        name="double_integrator",
    )


@dataclass(frozen=True)
class BicycleParams:
    wheelbase: float = 2.5
    v_max: float = 15.0
    a_min: float = -5.0
    a_max: float = 3.0
    delta_max: float = 0.5

    def __post_init__(self):
        if not self.wheelbase > 0:
            raise ValueError("wheelbase must be positive")


def bicycle_model(params: BicycleParams = BicycleParams(), lane_heading: float = 0.0) -> AffineSystem:
    """Kinematic bicycle, state ``(px, py, v, psi)``, input ``(a, tan(delta))``.

    Steering enters through ``tan(delta)`` so the model is input-affine; use
    :func:`steering_from_input` to recover the wheel angle. The output is
    ``(longitudinal position along lane_heading, psi)``.
    """
    L = params.wheelbase
    c, s = np.cos(lane_heading), np.sin(lane_heading)
    tan_max = np.tan(params.delta_max)

    def f(x):
        v, psi = x[..., 2], x[..., 3]
        z = np.zeros_like(v)
        return np.stack([v * np.cos(psi), v * np.sin(psi), z, z], axis=-1)

    def g(x):
        v = x[..., 2]
        out = np.zeros(np.shape(x)[:-1] + (4, 2))
        out[..., 2, 0] = 1.0
        out[..., 3, 1] = v / L
        return out

    def df(x):
        v, psi = x[2], x[3]
        J = np.zeros((4, 4))
        J[0, 2], J[0, 3] = np.cos(psi), -v * np.sin(psi)
        J[1, 2], J[1, 3] = np.sin(psi), v * np.cos(psi)
        return J

    H = np.array([[c, s, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]])

    return AffineSystem(
        state_dim=4,
        input_dim=2,
        output_dim=2,
        drift=f,
        input_map=g,
        output=lambda x: np.stack([c * x[..., 0] + s * x[..., 1], x[..., 3]], axis=-1),
        drift_jacobian=df,
        output_jacobian=lambda x: H,
        input_low=np.array([params.a_min, -tan_max]),
        input_high=np.array([params.a_max, tan_max]),
        name="bicycle",
    )


def bicycle_rk4(x: Array, u: Array, dt: float, wheelbase: float) -> Array:
    """RK4 step of :func:`bicycle_model` written out per component.

    Same arithmetic as ``rk4_step(bicycle_model(...), x, u, dt)`` up to
    rounding, without the generic vector-field machinery.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    comps = bicycle_rk4_components(x[..., 0], x[..., 1], x[..., 2], x[..., 3], u[..., 0], u[..., 1] / wheelbase, dt)
    out = np.stack(comps, axis=-1)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("bicycle: integration produced a non-finite state")
    return out


def bicycle_rk4_components(px, py, v, psi, a, w, dt: float):
    """Kernel of :func:`bicycle_rk4` on separate component arrays.

    ``w`` is ``tan(delta) / wheelbase``; all arguments broadcast together.
    """
    h = 0.5 * dt
    v2 = v + h * a
    v4 = v + dt * a
    p1 = v * w
    ps2 = psi + h * p1
    p2 = v2 * w
    ps3 = psi + h * p2
    p3 = p2
    ps4 = psi + dt * p3
    p4 = v4 * w
    c = dt / 6.0
    c2, c3 = np.cos(ps2), np.cos(ps3)
    s2, s3 = np.sin(ps2), np.sin(ps3)
    nx = px + c * (v * np.cos(psi) + 2.0 * v2 * (c2 + c3) + v4 * np.cos(ps4))
    ny = py + c * (v * np.sin(psi) + 2.0 * v2 * (s2 + s3) + v4 * np.sin(ps4))
    nv = v + dt * a
    npsi = psi + c * (p1 + 2.0 * p2 + 2.0 * p3 + p4)
    return nx, ny, nv, npsi


def bicycle_channels(system: AffineSystem, lane_heading: float = 0.0):
    """Split the bicycle into its two SISO chains.

    Returns ``(longitudinal, heading)``: longitudinal position driven by
    acceleration (relative degree 2) and heading driven by steering
    (relative degree 1). Cross-coupling between the chains is ignored.
    """
    c, s = np.cos(lane_heading), np.sin(lane_heading)
    H_long = np.array([[c, s, 0.0, 0.0]])
    H_head = np.array([[0.0, 0.0, 0.0, 1.0]])
    longitudinal = system.with_output(
        lambda x: (c * x[..., 0] + s * x[..., 1])[..., None],
        output_jacobian=lambda x: H_long,
        output_dim=1,
        input_columns=[0],
        name="bicycle/longitudinal",
    )
    heading = system.with_output(
        lambda x: x[..., 3:4],
        output_jacobian=lambda x: H_head,
        output_dim=1,
        input_columns=[1],
        name="bicycle/heading",
    )
    return longitudinal, heading


def steering_from_input(tan_delta):
    return np.arctan(tan_delta)


def yaw_rate(x: Array, tan_delta, wheelbase: float):
    return x[..., 2] / wheelbase * tan_delta


def bicycle_feedback(x: Array, v: Array, params: BicycleParams, lane_heading=0.0, kappa_max: float = KAPPA_MAX):
    """Closed-form per-channel feedback law for a batch of bicycle states.

    Equivalent to :func:`feedback_linearize` on the two systems returned by
    :func:`bicycle_channels` (both have zero drift compensation), but
    vectorized over agents. A channel whose decoupling term is singular
    passes the virtual control through unchanged as the raw input.

    Returns ``(u, saturated, singular)``; ``u`` has shape ``(..., 2)`` in
    ``(a, tan(delta))`` coordinates, the flags have shape ``(..., 2)``.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    beta = np.stack([np.cos(x[..., 3] - lane_heading), x[..., 2] / params.wheelbase], axis=-1)
    # a scalar decoupling term has condition number 1 unless it is exactly zero
    singular = ~(np.abs(beta) > 0.0) | (kappa_max < 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(singular, v, v / np.where(singular, 1.0, beta))
    tan_max = np.tan(params.delta_max)
    lo = np.array([params.a_min, -tan_max])
    hi = np.array([params.a_max, tan_max])
    clamped = np.clip(u, lo, hi)
    return clamped, clamped != u, singular
