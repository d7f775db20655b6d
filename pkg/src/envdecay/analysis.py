"""Power-law fits, the Gronwall-type lemma verifier and completely monotone checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import gamma

from .variance import DecaySeries

__all__ = [
    "PowerLawFit",
    "fit_power_law",
    "GronwallInstance",
    "GronwallReport",
    "gronwall_verify",
    "random_admissible_instance",
    "random_mixture",
    "CMFunction",
    "CMBoundReport",
    "cm_bound_check",
    "cm_signature_check",
    "SignatureReport",
    "DEFAULT_TMIN",
]

DEFAULT_TMIN = 4.0


# ---------------------------------------------------------------------------
# power laws


@dataclass
class PowerLawFit:
    exponent: float
    amplitude: float
    r_squared: float
    t_min: float
    t_max: float
    times: np.ndarray
    residuals: np.ndarray  # log(value) - log(fitted)
    exponent_se: float = float("nan")
    weighted: bool = False

    def predict(self, t) -> np.ndarray:
        return self.amplitude * np.asarray(t, dtype=float) ** self.exponent

    def to_dict(self) -> dict:
        return {
            "exponent": float(self.exponent),
            "exponent_se": float(self.exponent_se),
            "amplitude": float(self.amplitude),
            "r_squared": float(self.r_squared),
            "window": [float(self.t_min), float(self.t_max)],
            "n_points": int(len(self.times)),
            "weighted": bool(self.weighted),
            "times": [float(t) for t in self.times],
            "residuals": [float(r) for r in self.residuals],
        }


def fit_power_law(series, window: tuple[float, float] | None = None, values=None, std_errors=None) -> PowerLawFit:
    """Fit ``value = A t^beta`` by least squares in log-log coordinates.

    ``series`` is a :class:`DecaySeries` or an array of times (then pass
    ``values`` and optionally ``std_errors``).  Points are weighted by
    ``(value / std_error)^2`` (delta method) when every standard error in the
    window is positive; otherwise the fit is unweighted.  The default window
    keeps ``t >= 4`` and, for series that record one, ``t`` up to the
    wraparound limit.
    """
    if isinstance(series, DecaySeries):
        t, v, se = series.times, series.values, series.std_errors
        guard = series.metadata.get("guard_tmax")
    else:
        t = np.asarray(series, dtype=float)
        v = np.asarray(values, dtype=float)
        se = np.zeros_like(v) if std_errors is None else np.asarray(std_errors, dtype=float)
        guard = None
    if window is None:
        window = (DEFAULT_TMIN, float(guard) if guard is not None else np.inf)
    lo, hi = window
    keep = (t >= lo) & (t <= hi) & (t > 0)
    t, v, se = t[keep], v[keep], se[keep]
    if len(t) < 4:
        raise ValueError(f"need at least 4 points in window [{lo:g}, {hi:g}], have {len(t)}")
    if np.any(v <= 0):
        raise ValueError("non-positive values in the fit window")
    x, y = np.log(t), np.log(v)
    weighted = bool(np.all(np.isfinite(se)) and np.all(se > 0))
    w = (v / se) ** 2 if weighted else np.ones_like(v)
    w = w / w.sum()
    xm, ym = w @ x, w @ y
    sxx = w @ (x - xm) ** 2
    slope = (w @ ((x - xm) * (y - ym))) / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    ss_tot = w @ (y - ym) ** 2
    ss_res = w @ resid**2
    r2 = 1.0 if ss_tot <= 1e-30 * max(1.0, ym**2) else 1.0 - ss_res / ss_tot
    n = len(t)
    if weighted:
        slope_se = np.sqrt(1.0 / np.sum((v / se) ** 2 * (x - xm) ** 2))
    else:
        slope_se = np.sqrt(ss_res / (n - 2) / sxx) if n > 2 else float("nan")
    return PowerLawFit(float(slope), float(np.exp(intercept)), float(r2), float(t.min()), float(t.max()),
                       t, resid, float(slope_se), weighted)


# ---------------------------------------------------------------------------
# Gronwall-type lemma


@dataclass
class GronwallInstance:
    """A non-increasing ``a`` with its derivative, checked on ``grid``.

    ``a`` and ``a_prime`` are vectorised callables so the convolution
    integral can be refined independently of the grid.  ``C=None`` selects
    the smallest constant for which the hypothesis holds on the grid.
    """

    grid: np.ndarray
    a: Callable[[np.ndarray], np.ndarray]
    a_prime: Callable[[np.ndarray], np.ndarray]
    alpha: float
    C: float | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.alpha <= 0.5:
            raise ValueError("alpha must exceed 1/2")
        if len(self.grid) < 2 or self.grid[0] != 0 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must start at 0 and increase strictly")
        vals = self.values
        if np.any(np.diff(vals) > 1e-12 * np.maximum(1.0, np.abs(vals[:-1]))):
            raise ValueError("a must be non-increasing")
        if np.any(vals < 0):
            raise ValueError("a must be non-negative")

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.a(self.grid), dtype=float)

    def b(self, t) -> np.ndarray:
        """``sqrt(-2 a'(t) a(t))``; rounding-level positive slopes are clipped to zero."""
        t = np.asarray(t, dtype=float)
        return np.sqrt(np.maximum(-2.0 * np.asarray(self.a_prime(t)) * np.asarray(self.a(t)), 0.0))

    @classmethod
    def from_samples(cls, t, a, alpha: float, C: float | None = None) -> "GronwallInstance":
        """Monotone C^1 interpolant of samples (PCHIP in ``(log(t+1), log a)``).

        The samples must include ``t = 0`` and be positive and non-increasing.
        """
        t = np.asarray(t, dtype=float)
        a = np.asarray(a, dtype=float)
        if t[0] != 0:
            raise ValueError("samples must start at t = 0")
        if np.any(a <= 0):
            raise ValueError("samples must be positive")
        if np.any(np.diff(a) > 0):
            raise ValueError("a must be non-increasing")
        interp = PchipInterpolator(np.log1p(t), np.log(a))
        slope = interp.derivative()

        def a_fn(s):
            return np.exp(interp(np.log1p(np.clip(s, t[0], t[-1]))))

        def a_prime_fn(s):
            s = np.clip(np.asarray(s, dtype=float), t[0], t[-1])
            return a_fn(s) * slope(np.log1p(s)) / (1.0 + s)

        return cls(t, a_fn, a_prime_fn, alpha, C)


@dataclass
class GronwallReport:
    C: float
    hypothesis_margin: float  # min_t C * RHS(t) - a(t)
    hypothesis_holds: bool
    K: float  # smallest K with a(t) <= K max(C, a(0)) (t+1)^-alpha on the grid
    conclusion_holds: bool
    tail_slope: float  # d log((t+1)^alpha a) / d log(t+1) over the last half of the grid, diagnostic
    integral_error: float
    panels: int
    rhs: np.ndarray = field(repr=False, default=None)

    @property
    def status(self) -> str:
        if not self.hypothesis_holds:
            return "hypothesis fails"
        return "conclusion holds" if self.conclusion_holds else "conclusion violated"

    @property
    def violation(self) -> bool:
        """The implication is falsified: hypothesis holds but conclusion does not."""
        return self.hypothesis_holds and not self.conclusion_holds

    def to_dict(self) -> dict:
        return {
            "C": float(self.C),
            "hypothesis_margin": float(self.hypothesis_margin),
            "hypothesis_holds": bool(self.hypothesis_holds),
            "K": float(self.K),
            "conclusion_holds": bool(self.conclusion_holds),
            "tail_slope": float(self.tail_slope),
            "integral_error": float(self.integral_error),
            "panels": int(self.panels),
            "status": self.status,
        }


def _convolution(inst: GronwallInstance, panels: int) -> np.ndarray:
    """Trapezoid ``int_0^t (t - s + 1)^-alpha b(s) ds`` at every grid time.

    Each half of ``[0, t]`` is integrated in a logarithmic variable,
    ``s = e^u - 1`` on the first and ``s = t - (e^v - 1)`` on the second,
    which concentrates nodes where ``b`` and the kernel vary fastest.
    """
    t = inst.grid[:, None]
    u = np.linspace(0.0, 1.0, panels + 1)[None, :] * np.log1p(t / 2)
    jac = np.exp(u)
    s_lo = np.expm1(u)
    s_hi = t - s_lo
    vals = jac * ((t - s_lo + 1.0) ** (-inst.alpha) * inst.b(s_lo) + (s_lo + 1.0) ** (-inst.alpha) * inst.b(s_hi))
    h = np.log1p(inst.grid / 2) / panels
    return h * (vals.sum(axis=1) - 0.5 * (vals[:, 0] + vals[:, -1]))


def gronwall_verify(inst: GronwallInstance, tol: float = 1e-6, panels: int = 64, max_doublings: int = 14) -> GronwallReport:
    """Check the hypothesis ``a <= C((t+1)^-alpha + int (t-s+1)^-alpha b)`` and the decay conclusion.

    The two halves are reported separately, so an instance whose hypothesis
    fails is never counted against the lemma.  The conclusion is read as
    ``sup_t (t+1)^alpha a(t) / max(C, a(0))`` being finite on the grid; the
    slope of ``log((t+1)^alpha a)`` over the last half of the grid is kept
    as a diagnostic of where that supremum is heading.
    """
    prev = _convolution(inst, panels)
    err = np.inf
    for _ in range(max_doublings):
        panels *= 2
        cur = _convolution(inst, panels)
        err = float(np.max(np.abs(cur - prev)))
        prev = cur
        if err <= tol:
            break
    else:
        raise RuntimeError(f"convolution integral not converged to {tol:g} (last change {err:.3g})")
    t = inst.grid
    a = inst.values
    rhs = (t + 1.0) ** (-inst.alpha) + prev
    C = float(np.max(a / rhs)) if inst.C is None else float(inst.C)
    margin = float(np.min(C * rhs - a))
    scaled = a * (t + 1.0) ** inst.alpha
    K = float(np.max(scaled) / max(C, a[0])) if max(C, a[0]) > 0 else 0.0
    half = t >= np.sqrt(t[-1] + 1.0) - 1.0
    tail = float(np.polyfit(np.log1p(t[half]), np.log(np.maximum(scaled[half], 1e-300)), 1)[0]) if half.sum() >= 2 else 0.0
    return GronwallReport(C, margin, margin >= -1e-12 * max(1.0, float(np.max(a))), K,
                          bool(np.isfinite(K) and np.all(np.isfinite(scaled))), tail, err, panels, rhs)


def random_admissible_instance(rng: np.random.Generator, t_max: float = 100.0, n_knots: int = 8,
                               n_grid: int = 120) -> GronwallInstance:
    """A random monotone spline ``a`` with ``a(0) = 1`` and ``alpha`` in ``(0.6, 3)``.

    ``log a`` drops by random non-negative amounts between knots placed
    uniformly in ``log(t + 1)``; ``C`` is left to the verifier, which picks
    the smallest constant satisfying the hypothesis on the grid.
    """
    knots = np.expm1(np.linspace(0.0, np.log1p(t_max), n_knots))
    drops = rng.exponential(rng.uniform(0.1, 2.0), size=n_knots - 1)
    values = np.exp(-np.concatenate([[0.0], np.cumsum(drops)]))
    grid = np.concatenate([[0.0], np.geomspace(1e-2, t_max, n_grid)])
    inst = GronwallInstance.from_samples(knots, values, float(rng.uniform(0.6, 3.0)))
    return GronwallInstance(grid, inst.a, inst.a_prime, inst.alpha)


# ---------------------------------------------------------------------------
# completely monotone functions


@dataclass
class CMFunction:
    """``f(t) = sum_i w_i exp(-lambda_i t)`` with ``w_i, lambda_i >= 0``."""

    weights: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        self.rates = np.atleast_1d(np.asarray(self.rates, dtype=float))
        if self.weights.shape != self.rates.shape:
            raise ValueError("weights and rates must match")
        if len(self.weights) == 0:
            raise ValueError("empty mixture")
        if np.any(self.weights < 0) or np.any(self.rates < 0):
            raise ValueError("weights and rates must be non-negative")

    def derivative(self, t, n: int = 0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.sum(self.weights * (-self.rates) ** n * np.exp(-np.multiply.outer(t, self.rates)), axis=-1)

    def __call__(self, t) -> np.ndarray:
        return self.derivative(t, 0)

    @classmethod
    def power(cls, beta: float = 1.0, n: int = 128) -> "CMFunction":
        """``(1 + t)^-beta`` from its Gamma mixture, trapezoid rule in ``log(lambda)``.

        The integrand decays double-exponentially in ``log(lambda)``, so the
        rule converges geometrically; ``n = 128`` gives about ``1e-9``
        relative accuracy for ``beta = 1`` on ``t`` up to ``1e3``.
        """
        x = np.linspace(-40.0 / beta, np.log(60.0), n)
        w = (x[1] - x[0]) * np.exp(beta * x - np.exp(x)) / gamma(beta)
        return cls(w, np.exp(x))

    def sign_violations(self, t, n_max: int = 4) -> int:
        """Count of ``(n, t)`` with ``(-1)^n f^(n)(t) < 0``; zero for any valid mixture."""
        return int(sum(np.sum((-1) ** n * self.derivative(t, n) < 0) for n in range(n_max + 1)))


def random_mixture(rng: np.random.Generator, max_terms: int = 12) -> CMFunction:
    """Positive weights and rates spread over four decades."""
    n = int(rng.integers(1, max_terms + 1))
    return CMFunction(rng.exponential(size=n), 10.0 ** rng.uniform(-2, 2, size=n))


@dataclass
class CMBoundReport:
    alpha: float
    C: float
    margin: float  # min over grid of bound - (-f')
    holds: bool
    hypothesis_holds: bool

    @property
    def status(self) -> str:
        if not self.hypothesis_holds:
            return "hypothesis fails"
        return "bound holds" if self.holds else "bound violated"

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "C": self.C, "margin": self.margin, "holds": self.holds, "status": self.status}


def cm_bound_constant(alpha: float) -> float:
    """``e^alpha alpha^-alpha Gamma(alpha + 2)``."""
    return float(np.exp(alpha) * alpha ** (-alpha) * gamma(alpha + 2))


def cm_bound_check(f: CMFunction, grid, alpha: float) -> CMBoundReport:
    """Check ``-f'(t) <= C e^alpha alpha^-alpha Gamma(alpha+2) t^-(alpha+1)`` with ``C = sup_grid t^alpha f``.

    A positive atom at rate zero makes ``t^alpha f`` unbounded, so the
    hypothesis is reported as failing.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    grid = np.asarray(grid, dtype=float)
    if np.any(grid <= 0):
        raise ValueError("grid must be positive")
    if np.any((f.rates == 0) & (f.weights > 0)):
        return CMBoundReport(alpha, float("inf"), float("nan"), False, False)
    C = float(np.max(grid**alpha * f(grid)))
    bound = C * cm_bound_constant(alpha) * grid ** (-(alpha + 1))
    slope = -f.derivative(grid, 1)
    margin = float(np.min(bound - slope))
    return CMBoundReport(alpha, C, margin, bool(np.all(slope <= bound * (1 + 1e-12))), True)


@dataclass
class SignatureReport:
    passed: bool
    value_violations: int
    first_violations: int
    second_violations: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def cm_signature_check(u, du, d2u, u_se=None, du_se=None, d2u_se=None, k: float = 3.0) -> SignatureReport:
    """``u >= 0``, ``u' <= 0``, ``u'' >= 0`` pointwise, each within ``k`` standard errors."""
    u, du, d2u = (np.asarray(a, dtype=float) for a in (u, du, d2u))

    def slack(se, like):
        return np.zeros_like(like) if se is None else k * np.asarray(se, dtype=float)

    tiny = 1e-14 * np.max(np.abs(u)) if u.size else 0.0
    v0 = int(np.sum(u < -slack(u_se, u) - tiny))
    v1 = int(np.sum(du > slack(du_se, du) + tiny))
    v2 = int(np.sum(d2u < -slack(d2u_se, d2u) - tiny))
    return SignatureReport(v0 + v1 + v2 == 0, v0, v1, v2)
