"""Experiment metrics and significance tests over recorded series."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from statistics import NormalDist
from typing import Callable, List, Optional, Sequence

import numpy as np

RENORM_STEPS = 10  # Benettin renormalization interval
STATE_BOX = 1e6  # a separation beyond this stops the stability estimate early
WILCOXON_MIN_N = 6
REPORT_FIELDS = (
    "cumulative_reward",
    "convergence_episodes",
    "converged",
    "entropy",
    "control_error_rms",
    "eta_ca",
    "eta_ca_mean",
    "lambda2",
    "stability_index",
    "stability_partial",
    "message_efficiency",
)


# ---------------------------------------------------------------------------
# convergence


def moving_average(x, window: int) -> np.ndarray:
    """Trailing means; entry ``k`` averages ``x[k : k + window]``."""
    x = np.asarray(x, dtype=float)
    if window < 1:
        raise ValueError("window must be at least 1")
    if x.size < window:
        return np.zeros(0)
    c = np.concatenate([[0.0], np.cumsum(x)])
    return (c[window:] - c[:-window]) / window


def convergence_speed(rewards, window: int = 100, threshold: float = 0.95) -> Optional[int]:
    """First episode (1-based) whose trailing ``window`` average reaches
    ``threshold`` of the best trailing average, or None if it never does.

    The target is ``best - (1 - threshold) * |best|``, which is
    ``threshold * best`` for a nonnegative best average and stays attainable
    when all rewards are negative.
    """
    x = np.asarray(rewards, dtype=float)
    if x.size < window:
        raise ValueError(f"need at least {window} episodes, got {x.size}")
    ma = moving_average(x, window)
    best = ma.max()
    target = best - (1.0 - threshold) * abs(best)
    hit = np.flatnonzero(ma >= target)
    if hit.size == 0:
        return None
    return int(hit[0]) + window


# ---------------------------------------------------------------------------
# credit assignment


@dataclass
class CreditEfficiency:
    per_agent: np.ndarray  # Pearson correlation of phi_i with R, NaN where undefined
    mean: float
    defined: np.ndarray  # (N,) bool


def credit_assignment_efficiency(phi, R) -> CreditEfficiency:
    """Per-agent correlation between individual credit (T, N) and global reward (T,)."""
    phi = np.asarray(phi, dtype=float)
    R = np.asarray(R, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    if phi.shape[0] != R.shape[0]:
        raise ValueError("phi and R must have the same length")
    if R.shape[0] < 3:
        raise ValueError("need at least 3 steps")
    dr = R - R.mean()
    dp = phi - phi.mean(axis=0)
    sr = math.sqrt(float(dr @ dr))
    sp = np.sqrt(np.sum(dp * dp, axis=0))
    # relative tolerance: a series that is constant up to rounding has no variance
    ok = (sp > 1e-12 * (np.abs(phi).max(axis=0) * math.sqrt(len(R)) + 1e-300)) & (
        sr > 1e-12 * (np.abs(R).max() * math.sqrt(len(R)) + 1e-300)
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(ok, (dp.T @ dr) / (sp * sr), np.nan)
    rho = np.clip(rho, -1.0, 1.0)
    mean = float(np.mean(rho[ok])) if ok.any() else float("nan")
    return CreditEfficiency(rho, mean, ok)


# ---------------------------------------------------------------------------
# stability and tracking


@dataclass
class StabilityEstimate:
    S: float  # mean log-expansion per second
    intervals: int
    partial: bool  # stopped early (divergence or collapse)


def stability_index(
    step: Callable[[np.ndarray, int], np.ndarray],
    x0,
    dt: float,
    steps: int,
    dim: int = 0,
    delta0: float = 1e-6,
    renorm: int = RENORM_STEPS,
    box: float = STATE_BOX,
) -> StabilityEstimate:
    """Benettin estimate of the largest Lyapunov exponent of ``x -> step(x, k)``.

    ``step`` must be deterministic given the tick ``k`` so that the nominal
    and the perturbed copy see the same random draws.  The perturbation is
    renormalized to ``delta0`` every ``renorm`` ticks.
    """
    x = np.array(x0, dtype=float).ravel()
    y = x.copy()
    y[dim] += delta0
    logs = []
    partial = False
    for k in range(steps):
        x = np.asarray(step(x, k), dtype=float).ravel()
        y = np.asarray(step(y, k), dtype=float).ravel()
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))) or np.abs(x - y).max() > box:
            partial = True
            break
        if (k + 1) % renorm == 0:
            d = float(np.linalg.norm(y - x))
            if d == 0.0:
                partial = True  # the perturbation collapsed; its log is undefined
                break
            logs.append(math.log(d / delta0))
            y = x + (y - x) * (delta0 / d)
    n = len(logs)
    S = float(np.sum(logs) / (n * renorm * dt)) if n else float("nan")
    return StabilityEstimate(S, n, partial)


def control_error_rms(actual, reference) -> float:
    """RMS Euclidean deviation between position trajectories (..., 2)."""
    a = np.asarray(actual, dtype=float)
    r = np.asarray(reference, dtype=float)
    if a.shape != r.shape:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {r.shape}")
    if a.size == 0:
        return float("nan")
    d2 = np.sum((a - r) ** 2, axis=-1)
    return float(math.sqrt(d2.mean()))


def platoon_reference(positions, layout, headway: float) -> np.ndarray:
    """Desired positions (T, N, 2): each vehicle on its lane centre line, and
    each follower ``headway`` metres behind its predecessor along the lane."""
    p = np.asarray(positions, dtype=float)
    c, s = np.cos(layout.lane_heading), np.sin(layout.lane_heading)
    along = layout.along(p)
    pred = layout.predecessor
    follow = pred >= 0
    along = np.where(follow, np.take(along, np.maximum(pred, 0), axis=-1) - headway, along)
    ref = np.empty_like(p)
    ref[..., 0] = layout.lane_point[:, 0] + c * along
    ref[..., 1] = layout.lane_point[:, 1] + s * along
    return ref


# ---------------------------------------------------------------------------
# significance tests


@dataclass
class TestResult:
    statistic: float
    p_value: float
    defined: bool = True
    df: Optional[float] = None
    n: Optional[int] = None

    __test__ = False  # not a pytest class


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction of the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """Upper tail ``P(T > t)`` of Student's t with ``df`` degrees of freedom."""
    if math.isinf(df):
        return NormalDist().cdf(-t)
    tail = 0.5 * betainc(0.5 * df, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def welch_t_test(a, b) -> TestResult:
    """Two-sided Welch test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size < 2 or b.size < 2:
        return TestResult(float("nan"), float("nan"), False)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    diff = a.mean() - b.mean()
    if not se2 > 0:
        return TestResult(float("nan"), float("nan"), False)
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = min(1.0, 2.0 * t_sf(abs(t), df))
    return TestResult(float(t), p, True, float(df), int(a.size + b.size))


def rank_average(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    edges = np.flatnonzero(np.concatenate([[True], xs[1:] != xs[:-1], [True]]))
    ranks = np.empty(x.size)
    for lo, hi in zip(edges[:-1], edges[1:]):
        ranks[order[lo:hi]] = 0.5 * (lo + 1 + hi)
    return ranks


def wilcoxon_signed_rank(x, y=None) -> TestResult:
    """Two-sided signed-rank test by the normal approximation with tie correction.

    Zero differences are dropped.  The statistic is the smaller of the
    positive and negative rank sums.
    """
    d = np.asarray(x, dtype=float).ravel()
    if y is not None:
        d = d - np.asarray(y, dtype=float).ravel()
    d = d[d != 0.0]
    n = d.size
    if n < WILCOXON_MIN_N:
        return TestResult(float("nan"), float("nan"), False, n=n)
    r = rank_average(np.abs(d))
    w_plus = float(r[d > 0].sum())
    w_minus = float(r[d < 0].sum())
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts**3 - counts) / 48.0
    if not var > 0:
        return TestResult(float("nan"), float("nan"), False, n=n)
    z = (w_plus - n * (n + 1) / 4.0) / math.sqrt(var)
    p = min(1.0, 2.0 * NormalDist().cdf(-abs(z)))
    return TestResult(min(w_plus, w_minus), p, True, n=n)


def cohens_d(a, b) -> float:
    """Mean difference over the pooled standard deviation."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size < 2 or b.size < 2:
        return float("nan")
    pooled = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2)
    if not pooled > 0:
        return float("nan")
    return float((a.mean() - b.mean()) / math.sqrt(pooled))


# ---------------------------------------------------------------------------
# report


def _clean(x):
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(float(x)) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _nan(xs):
    return [float("nan") if v is None else v for v in xs]


@dataclass
class MetricReport:
    cumulative_reward: List[float] = field(default_factory=list)
    convergence_episodes: Optional[int] = None
    converged: bool = False
    entropy: List[float] = field(default_factory=list)
    control_error_rms: float = float("nan")
    eta_ca: List[float] = field(default_factory=list)
    eta_ca_mean: float = float("nan")
    lambda2: List[float] = field(default_factory=list)
    stability_index: float = float("nan")
    stability_partial: bool = False
    message_efficiency: float = float("nan")

    def __post_init__(self):
        if self.entropy and len(self.entropy) != len(self.cumulative_reward):
            raise ValueError("entropy series must match the reward series length")
        if self.convergence_episodes is not None and self.convergence_episodes > len(self.cumulative_reward):
            raise ValueError("convergence episode beyond the series")

    def to_json(self) -> str:
        """JSON with fixed field names; NaN and infinities become null."""
        return json.dumps({k: _clean(v) for k, v in asdict(self).items()}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        unknown = set(d) - set(REPORT_FIELDS)
        if unknown:
            raise ValueError(f"unknown report fields {sorted(unknown)}")
        for k in ("cumulative_reward", "entropy", "eta_ca", "lambda2"):
            if k in d:
                d[k] = _nan(d[k])
        for k in ("control_error_rms", "eta_ca_mean", "stability_index", "message_efficiency"):
            if k in d and d[k] is None:
                d[k] = float("nan")
        return cls(**d)


def build_report(
    rewards: Sequence[float],
    entropy: Sequence[float] = (),
    phi=None,
    R=None,
    lambda2=(),
    positions=None,
    reference=None,
    messages_delivered: Optional[int] = None,
    stability: Optional[StabilityEstimate] = None,
    window: int = 100,
) -> MetricReport:
    """Assemble a report; pieces that are not supplied stay empty or NaN."""
    rewards = [float(r) for r in rewards]
    conv = convergence_speed(rewards, window) if len(rewards) >= window else None
    rep = MetricReport(cumulative_reward=rewards, convergence_episodes=conv, converged=conv is not None)
    rep.entropy = [float(e) for e in entropy]
    if phi is not None and R is not None and len(R) >= 3:
        eff = credit_assignment_efficiency(phi, R)
        rep.eta_ca = [float(v) for v in eff.per_agent]
        rep.eta_ca_mean = eff.mean
    rep.lambda2 = [float(v) for v in lambda2]
    if positions is not None and reference is not None:
        rep.control_error_rms = control_error_rms(positions, reference)
    if messages_delivered:
        rep.message_efficiency = float(np.sum(rewards)) / messages_delivered
    if stability is not None:
        rep.stability_index = stability.S
        rep.stability_partial = stability.partial
    rep.__post_init__()
    return rep
