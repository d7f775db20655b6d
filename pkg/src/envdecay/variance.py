"""Statistics of the environment seen from the walker, and the identities behind its decay.

Everything here is built on ``f_t = P_t^omega f``, computed exactly by
uniformization on the torus.  Conditional expectations ``E^{(y)}`` integrate
out the ``d`` positive-direction conductances owned by ``y`` using a
:class:`VerticalDerivativeScheme`.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .kernel import UniformizationParams, apply_generator, kernel_from, propagate
from .lattice import (
    STREAM_MC,
    STREAM_RESAMPLE,
    ConductanceLaw,
    Environment,
    LatticeSpec,
    LocalFunction,
    enumerate_assignments,
    gradient_of,
    generator_of,
    local_field,
    replica_generator,
    sample_environment,
)
from .walker import mc_ft

__all__ = [
    "GUARD_FACTOR",
    "WraparoundError",
    "VerticalDerivativeScheme",
    "DecaySeries",
    "wraparound_tmax",
    "check_wraparound",
    "observable_mean",
    "local_covariance",
    "exact_ft",
    "estimate_variance_decay",
    "vertical_derivative",
    "conditional_environments",
    "EfronSteinResult",
    "efron_stein_check",
    "h_field",
    "compute_h_g",
    "case_table_residual",
    "intermediate_identity_residual",
    "duhamel_terms",
    "duhamel_residual",
    "law_ensemble",
    "KeyLemmaReport",
    "lemmeclef_check",
    "key_lemma_check",
    "DirichletReport",
    "dirichlet_derivative",
    "fixed_scheme_divergence_decay",
    "iterated_generator_decay",
]

GUARD_FACTOR = 8.0
GUARD_QUANTILE = 0.999
SIMPSON_TOL = 1e-9
SIMPSON_MAX_DOUBLINGS = 12
ENUMERATION_LIMIT = 4096  # largest law ensemble enumerated exactly


class WraparoundError(ValueError):
    """The torus is too small for the requested time horizon."""


# ---------------------------------------------------------------------------
# torus-size guard


def wraparound_tmax(spec: LatticeSpec, w_max: float, factor: float = GUARD_FACTOR) -> float:
    """Largest ``t`` with ``factor * sqrt(2 d w_max t) <= L``."""
    if factor is None or factor <= 0:
        return float("inf")
    return (spec.L / factor) ** 2 / (2 * spec.d * w_max)


def check_wraparound(spec: LatticeSpec, w_max: float, t: float, factor: float | None = GUARD_FACTOR) -> None:
    """Refuse ``t`` for which the walk's spread is not small against the side.

    ``factor=None`` disables the guard; identities that hold on any finite
    torus are checked that way.
    """
    if factor is None or factor <= 0:
        return
    spread = factor * np.sqrt(2 * spec.d * w_max * t)
    if spread > spec.L * (1 + 1e-12):
        raise WraparoundError(
            f"t={t:g} needs side >= {spread:.1f} (guard {factor:g}*sqrt(2*d*w_max*t), w_max={w_max:g}); "
            f"side is {spec.L}, largest admissible t is {wraparound_tmax(spec, w_max, factor):.3g}"
        )


def _law_wmax(law: ConductanceLaw) -> float:
    return float(law.quantile(GUARD_QUANTILE))


# ---------------------------------------------------------------------------
# series container


@dataclass
class DecaySeries:
    times: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray
    metadata: dict = field(default_factory=dict)
    first_derivative: np.ndarray | None = None
    first_derivative_se: np.ndarray | None = None
    second_derivative: np.ndarray | None = None
    second_derivative_se: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.std_errors = np.asarray(self.std_errors, dtype=float)
        if not (self.times.shape == self.values.shape == self.std_errors.shape):
            raise ValueError("times, values and std_errors must have the same length")

    def __len__(self):
        return len(self.times)

    def increases(self, k: float = 3.0) -> np.ndarray:
        """Indices ``j`` where ``values[j+1]`` exceeds ``values[j]`` by more than ``k`` sigma."""
        se = np.hypot(self.std_errors[1:], self.std_errors[:-1])
        return np.flatnonzero(np.diff(self.values) > k * se + 1e-15 * np.abs(self.values[:-1]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["t", "value", "std_error"])
            for t, v, s in zip(self.times, self.values, self.std_errors):
                out.writerow([repr(float(t)), repr(float(v)), repr(float(s))])

    @classmethod
    def from_csv(cls, path, metadata: dict | None = None) -> "DecaySeries":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2], dict(metadata or {}))

    def sidecar(self) -> dict:
        out = dict(self.metadata)
        for name in ("first_derivative", "first_derivative_se", "second_derivative", "second_derivative_se"):
            arr = getattr(self, name)
            if arr is not None:
                out[name] = [float(v) for v in arr]
        return out

    def write_sidecar(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _mean_se(samples: np.ndarray, weights: np.ndarray | None = None):
    """Mean and standard error along axis 0; weighted ensembles are exact (se 0)."""
    samples = np.asarray(samples, dtype=float)
    if weights is not None:
        mean = np.tensordot(weights, samples, axes=1)
        return mean, np.zeros_like(mean)
    n = len(samples)
    mean = samples.mean(axis=0)
    if n < 2:
        return mean, np.full_like(mean, np.nan)
    return mean, samples.std(axis=0, ddof=1) / np.sqrt(n)


# ---------------------------------------------------------------------------
# observables under the law


def _support_values(law: ConductanceLaw, k: int, q: int, limit: int = 2_000_000):
    n_nodes = len(law.quadrature(q)[0]) ** k
    if n_nodes > limit:
        raise ValueError(f"tensor quadrature over {k} edges needs {n_nodes} nodes (limit {limit})")
    return enumerate_assignments(law, k, q)


def observable_mean(f: LocalFunction, law: ConductanceLaw, q: int = 8) -> float:
    """``E[f(0, omega)]`` by enumeration (discrete laws) or tensor quadrature."""
    vals, wts = _support_values(law, len(f.support), q)
    return float(wts @ f.evaluate(vals.T))


def _require_centered(f: LocalFunction, law: ConductanceLaw) -> None:
    """Reject ``f`` with ``E[f] != 0``.

    Discrete laws are checked exactly.  Observables built centred are
    trusted for continuous laws (quadrature of a heavy-tailed quantile is not
    accurate enough to confirm a zero mean) and when the support is too large
    to enumerate.
    """
    if f.centered and law.atoms() is None:
        return
    try:
        mean = observable_mean(f, law)
    except ValueError:
        if f.centered:
            return
        raise ValueError(f"cannot verify that {f.name} is centred and it is not marked as such") from None
    scale = max(1.0, float(law.second_moment)) * max(1, len(f.support))
    if abs(mean) > 1e-12 * scale:
        raise ValueError(f"observable {f.name} is not centred under {law.spec_string()} (mean {mean:.6g})")


def local_covariance(f: LocalFunction, law: ConductanceLaw, spec: LatticeSpec, q: int = 8) -> dict:
    """``delta -> E[f(0) f(delta)]`` for every offset whose supports share an edge.

    For a centred ``f`` all other offsets contribute zero.
    """
    f._check_fits(spec)
    if 2 * f.diameter() + 2 >= spec.L:
        raise ValueError(f"side {spec.L} too small to separate translates of {f.name}")
    offsets = set()
    for z1, i in f.support:
        for z2, j in f.support:
            if i == j:
                offsets.add(tuple(a - b for a, b in zip(z1, z2)))
    cov = {}
    for delta in sorted(offsets):
        shifted = [(tuple(a + b for a, b in zip(z, delta)), i) for z, i in f.support]
        union = list(dict.fromkeys(list(f.support) + shifted))
        pos = {e: k for k, e in enumerate(union)}
        vals, wts = _support_values(law, len(union), q)
        a = f.evaluate(vals[:, [pos[e] for e in f.support]].T)
        b = f.evaluate(vals[:, [pos[e] for e in shifted]].T)
        cov[delta] = float(wts @ (a * b))
    return cov


def _covariance_form(coeffs: np.ndarray, cov: dict, spec: LatticeSpec) -> np.ndarray:
    """``sum_{x,y} c_x c_y C(y - x)`` for each row of ``coeffs``."""
    c = np.asarray(coeffs, dtype=float).reshape((-1,) + spec.shape)
    axes = tuple(range(1, spec.d + 1))
    out = np.zeros(len(c))
    for delta, value in cov.items():
        out += value * np.sum(c * np.roll(c, tuple(-z for z in delta), axis=axes), axis=axes)
    return out


# ---------------------------------------------------------------------------
# f_t


def exact_ft(env: Environment, f: LocalFunction, t: float, guard_factor: float | None = GUARD_FACTOR,
             params: UniformizationParams | None = None, origin: int = 0) -> float:
    """``f_t(origin, omega) = sum_y p_t(origin, y) f(y, omega)`` by uniformization."""
    if t < 0:
        raise ValueError("t must be >= 0")
    w_max = _law_wmax(env.law) if env.law is not None else float(env.w.max())
    check_wraparound(env.spec, w_max, t, guard_factor)
    field_ = local_field(f, env)
    if t == 0:
        return float(field_[origin])
    return float(kernel_from(env, origin, [t], params)[0] @ field_)


def _variance_replica(task):
    law, f, spec, times, seed, r, inner, n_walks, params, derivatives = task
    env = sample_environment(law, spec, seed, r)
    if inner == "mc":
        vals = np.empty(len(times))
        for j, t in enumerate(times):
            a = mc_ft(env, f, t, n_walks, seed, r, key=(j, 0))[0]
            b = mc_ft(env, f, t, n_walks, seed, r, key=(j, 1))[0]
            vals[j] = a * b
        return vals, None, None
    u = propagate(env, local_field(f, env), times, params)[0]
    n = spec.n_sites
    vals = np.sum(u**2, axis=1) / n
    if not derivatives:
        return vals, None, None
    lu = np.array([apply_generator(env, row) for row in u])
    return vals, 2 * np.sum(lu * u, axis=1) / n, 4 * np.sum(lu**2, axis=1) / n


def _map_ordered(func, tasks, workers: int):
    """``[func(t) for t in tasks]`` with optional processes; results stay in task order."""
    if workers is None or workers <= 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def estimate_variance_decay(law: ConductanceLaw, f: LocalFunction, spec: LatticeSpec, times, n_env: int,
                            master_seed: int = 0, workers: int = 1, inner: str = "exact", n_walks: int = 1000,
                            guard_factor: float | None = GUARD_FACTOR, params: UniformizationParams | None = None,
                            derivatives: bool = False) -> DecaySeries:
    """``E[f_t(0, omega)^2]`` over ``n_env`` environments (replica seeds ``0..n_env-1``).

    With ``inner="exact"`` each environment contributes the torus average
    ``N^-1 sum_x f_t(x, omega)^2``; by translation invariance of the law this
    has the same expectation as ``f_t(0, omega)^2`` with far less variance,
    and it is non-increasing and convex in ``t`` for every environment.
    ``derivatives=True`` adds the exact first and second ``t``-derivatives
    ``2<L f_t, f_t>/N`` and ``4 ||L f_t||^2 / N``.

    ``inner="mc"`` multiplies two independent ``n_walks`` walk averages at the
    origin, an unbiased estimate of ``f_t(0)^2``.
    """
    times = np.asarray(times, dtype=float)
    if n_env < 1:
        raise ValueError("n_env must be >= 1")
    if inner not in ("exact", "mc"):
        raise ValueError("inner must be 'exact' or 'mc'")
    if np.any(times < 0):
        raise ValueError("times must be >= 0")
    f._check_fits(spec)
    _require_centered(f, law)
    check_wraparound(spec, _law_wmax(law), float(times.max()), guard_factor)
    deriv = derivatives and inner == "exact"
    tasks = [(law, f, spec, times, master_seed, r, inner, n_walks, params, deriv) for r in range(n_env)]
    results = _map_ordered(_variance_replica, tasks, workers)
    vals, se = _mean_se(np.array([r[0] for r in results]))
    series = DecaySeries(
        times,
        vals,
        se,
        {
            "quantity": "E[f_t(0)^2]",
            "law": law.spec_string(),
            "observable": f.name,
            "d": spec.d,
            "L": spec.L,
            "n_env": n_env,
            "master_seed": master_seed,
            "replica_seeds": [0, n_env - 1],
            "inner": inner,
            "n_walks": n_walks if inner == "mc" else None,
            "estimator": "torus average per environment" if inner == "exact" else "paired walk averages at origin",
            "guard_factor": guard_factor,
            "guard_tmax": wraparound_tmax(spec, _law_wmax(law), guard_factor) if guard_factor else None,
        },
    )
    if deriv:
        series.first_derivative, series.first_derivative_se = _mean_se(np.array([r[1] for r in results]))
        series.second_derivative, series.second_derivative_se = _mean_se(np.array([r[2] for r in results]))
    return series


# ---------------------------------------------------------------------------
# conditional expectations and vertical derivatives


@dataclass(frozen=True)
class VerticalDerivativeScheme:
    """How ``E^{(y)}`` integrates out the conductances of ``a(y)``.

    ``exact`` enumerates the atoms of a discrete law, ``quadrature`` uses
    ``q`` Gauss-Legendre nodes per edge in the quantile variable, and
    ``resample`` averages ``samples`` i.i.d. redraws keyed by ``seed``.
    """

    mode: str = "exact"
    q: int = 8
    samples: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("exact", "quadrature", "resample"):
            raise ValueError(f"unknown scheme {self.mode!r}")

    def nodes(self, law: ConductanceLaw, k: int, key: int = 0):
        """Values ``(M, k)`` and weights ``(M,)`` for ``k`` independent edges."""
        if self.mode == "exact":
            if law.atoms() is None:
                raise ValueError(f"exact enumeration needs a discrete law, got {law.spec_string()}")
            return enumerate_assignments(law, k)
        if self.mode == "quadrature":
            return enumerate_assignments(law, k, self.q)
        u = replica_generator(self.seed, key, STREAM_RESAMPLE).random((self.samples, k))
        return law.ppf(u), np.full(self.samples, 1.0 / self.samples)


EXACT = VerticalDerivativeScheme("exact")


def _law_of(env: Environment, law: ConductanceLaw | None) -> ConductanceLaw:
    law = law or env.law
    if law is None:
        raise ValueError("environment carries no law; pass one explicitly")
    return law


def conditional_environments(env: Environment, y: int, scheme: VerticalDerivativeScheme = EXACT,
                             law: ConductanceLaw | None = None):
    """Copies of ``env`` with ``a(y)`` replaced by each scheme node, plus weights."""
    law = _law_of(env, law)
    edges = env.star(y)
    vals, wts = scheme.nodes(law, len(edges), key=y)
    return [env.with_edges(edges, v) for v in vals], wts


def vertical_derivative(F, env: Environment, y: int, scheme: VerticalDerivativeScheme = EXACT,
                        law: ConductanceLaw | None = None) -> float:
    """``F(omega) - E^{(y)}[F](omega)`` for a functional ``F: Environment -> float``.

    Written as ``-sum_m w_m (F(omega_m) - F(omega))`` so functionals that
    ignore ``a(y)`` give exactly zero.
    """
    envs, wts = conditional_environments(env, y, scheme, law)
    base = float(F(env))
    return float(-sum(w * (float(F(e)) - base) for w, e in zip(wts, envs)))


# ---------------------------------------------------------------------------
# Efron-Stein


@dataclass
class EfronSteinResult:
    lhs: float  # Var(F)
    rhs: float  # sum_i E[Var^{(i)}(F)]
    std_error: float
    exact: bool

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.slack >= (-1e-10 if self.exact else -3 * self.std_error)


def efron_stein_check(F, laws, n: int | None = None, n_samples: int = 20000, seed: int = 0,
                      max_enumeration: int = 4096) -> EfronSteinResult:
    """Compare ``Var(F)`` with the Efron-Stein bound for independent inputs.

    ``F`` maps an array of shape ``(M, n)`` to ``M`` values.  ``laws`` is a
    single law or one per variable.  Discrete inputs with at most
    ``max_enumeration`` joint states are enumerated exactly; otherwise the
    conditional variances are estimated by resampling one coordinate at a
    time, ``E[Var^{(i)}] = E[(F(X) - F(X^{(i)}))^2] / 2``.
    """
    if isinstance(laws, ConductanceLaw):
        if n is None:
            raise ValueError("n is required with a single law")
        laws = [laws] * n
    laws = list(laws)
    n = len(laws)
    atoms = [law.atoms() for law in laws]
    if all(a is not None for a in atoms) and np.prod([len(a[0]) for a in atoms]) <= max_enumeration:
        shape = tuple(len(a[0]) for a in atoms)
        idx = np.array(list(product(*(range(s) for s in shape))), dtype=int).reshape(-1, n)
        x = np.column_stack([atoms[i][0][idx[:, i]] for i in range(n)]) if n else np.empty((1, 0))
        p = np.prod([atoms[i][1][idx[:, i]] for i in range(n)], axis=0) if n else np.ones(1)
        vals = np.asarray(F(x), dtype=float).reshape(shape)
        prob = p.reshape(shape)
        mean = np.sum(prob * vals)
        lhs = float(np.sum(prob * (vals - mean) ** 2))
        rhs = 0.0
        for i in range(n):
            pi = atoms[i][1].reshape([-1 if k == i else 1 for k in range(n)])
            cond = np.sum(pi * vals, axis=i, keepdims=True)
            rhs += float(np.sum(prob * (vals - cond) ** 2))
        return EfronSteinResult(lhs, rhs, 0.0, True)
    rng = replica_generator(seed, 0, STREAM_MC)
    x = np.column_stack([law.ppf(rng.random(n_samples)) for law in laws])
    fx = np.asarray(F(x), dtype=float)
    parts = np.zeros(n_samples)
    for i, law in enumerate(laws):
        xi = x.copy()
        xi[:, i] = law.ppf(rng.random(n_samples))
        parts += 0.5 * (fx - np.asarray(F(xi), dtype=float)) ** 2
    centred = (fx - fx.mean()) ** 2 * n_samples / (n_samples - 1)
    diff = parts - centred
    return EfronSteinResult(float(centred.mean()), float(parts.mean()),
                            float(diff.std(ddof=1) / np.sqrt(n_samples)), False)


# ---------------------------------------------------------------------------
# h_s, g_s and the identities built from them


def _require_exact(scheme: VerticalDerivativeScheme) -> None:
    if scheme.mode != "exact":
        raise ValueError("this identity is checked with exact enumeration only")


def _conditioned_fields(env, f, y, times, scheme, law, params):
    """``f_s`` on ``env`` and on each conditioned copy: ``(base (T,N), fields (M,T,N), envs, weights)``."""
    envs, wts = conditional_environments(env, y, scheme, law)
    base = propagate(env, local_field(f, env), times, params)[0]
    fields = np.stack([propagate(e, local_field(f, e), times, params)[0] for e in envs])
    return base, fields, envs, wts


def _h_from_fields(env, envs, wts, fields):
    """``sum_m w_m (L^{omega_m} - L^omega) u_m`` for each time row: shape ``(T, N)``.

    Equal to ``E^{(y)}[L f_s] - L E^{(y)}[f_s]``; the two generators differ
    only on rows touching ``a(y)``, so the result vanishes identically elsewhere.
    """
    out = np.zeros(fields.shape[1:])
    for w, e, u in zip(wts, envs, fields):
        out += w * np.array([apply_generator(e, row) - apply_generator(env, row) for row in u])
    return out


def _g_from_fields(env, envs, wts, fields, y):
    """``g_i = sum_m w_m (omega^m_{y,i} - omega_{y,i}) D_i u_m(y)``: shape ``(T, d)``."""
    spec = env.spec
    edges = env.star(y)
    out = np.zeros((fields.shape[1], spec.d))
    for w, e, u in zip(wts, envs, fields):
        for i in range(spec.d):
            nb = spec.shift(y, spec.unit(i))
            out[:, i] += w * (e.w[edges[i]] - env.w[edges[i]]) * (u[:, nb] - u[:, y])
    return out


def h_field(env: Environment, f: LocalFunction, s: float, y: int, scheme: VerticalDerivativeScheme = EXACT,
            law: ConductanceLaw | None = None, params=None):
    """``(x -> h_s(x, y, omega), g_s(y, y, omega, .))`` with exact enumeration."""
    _require_exact(scheme)
    f._check_fits(env.spec)
    _, fields, envs, wts = _conditioned_fields(env, f, y, [s], scheme, law, params)
    return _h_from_fields(env, envs, wts, fields)[0], _g_from_fields(env, envs, wts, fields, y)[0]


def compute_h_g(env: Environment, f: LocalFunction, s: float, x: int, y: int,
                scheme: VerticalDerivativeScheme = EXACT, law: ConductanceLaw | None = None, params=None):
    """``(h_s(x, y, omega), [g_s(y, y, omega, i) for i = 1..d])``."""
    h, g = h_field(env, f, s, y, scheme, law, params)
    return float(h[x]), g


def _case_table(spec: LatticeSpec, y: int, g: np.ndarray) -> np.ndarray:
    expected = np.zeros(spec.n_sites)
    expected[y] = g.sum()
    for i in range(spec.d):
        expected[spec.shift(y, spec.unit(i))] += -g[i]
    return expected


def case_table_residual(env: Environment, f: LocalFunction, s: float, y: int, law=None, params=None) -> float:
    """``max_x |h_s(x, y) - table(x)|`` with ``table`` = ``sum g`` at ``y``, ``-g_i`` at ``y + e_i``, 0 elsewhere."""
    h, g = h_field(env, f, s, y, EXACT, law, params)
    return float(np.max(np.abs(h - _case_table(env.spec, y, g))))


def intermediate_identity_residual(env: Environment, f: LocalFunction, s: float, t: float, y: int,
                                   law=None, params=None) -> float:
    """``max_x |P_t h_s(x, y) + sum_i D_i p_t(x, .)(y) g_s(y, y, i)|``."""
    spec = env.spec
    h, g = h_field(env, f, s, y, EXACT, law, params)
    pth = propagate(env, h, [t], params)[0][0]
    col = kernel_from(env, y, [t], params)[0]  # p_t(y, x) = p_t(x, y)
    rhs = np.zeros(spec.n_sites)
    for i in range(spec.d):
        col_i = kernel_from(env, spec.shift(y, spec.unit(i)), [t], params)[0]
        rhs += (col_i - col) * g[i]
    return float(np.max(np.abs(pth + rhs)))


def _simpson(values: np.ndarray, width: float) -> float:
    n = len(values) - 1
    return float(width / (3 * n) * (values[0] + values[-1] + 4 * values[1:-1:2].sum() + 2 * values[2:-1:2].sum()))


def duhamel_terms(env: Environment, f: LocalFunction, t: float, y: int, x: int = 0, law=None, params=None):
    """The three pieces of the commutation formula at ``x``.

    Returns ``(d_y P_t f(x), P_t d_y f(x), int_0^t P_{t-s} h_s(x, y) ds)``;
    they satisfy ``first = second - third``.  The integral uses composite
    Simpson, doubling the panels from 2 until two successive values differ
    by less than ``1e-9``.
    """
    f._check_fits(env.spec)
    envs, wts = conditional_environments(env, y, EXACT, law)
    base_f = local_field(f, env)
    cond_f = [local_field(f, e) for e in envs]
    dyf = -sum(w * (cf - base_f) for w, cf in zip(wts, cond_f))
    if t == 0:
        return float(dyf[x]), float(dyf[x]), 0.0
    u_t = propagate(env, base_f, [t], params)[0][0]
    cond_t = [propagate(e, cf, [t], params)[0][0] for e, cf in zip(envs, cond_f)]
    first = float(-sum(w * (c[x] - u_t[x]) for w, c in zip(wts, cond_t)))
    second = float(propagate(env, dyf, [t], params)[0][0][x])

    def integral(n):
        s = np.linspace(0.0, t, n + 1)
        fields = np.stack([propagate(e, cf, s, params)[0] for e, cf in zip(envs, cond_f)])
        h = _h_from_fields(env, envs, wts, fields)
        rows = kernel_from(env, x, t - s, params)
        return _simpson(np.sum(rows * h, axis=1), t)

    n = 2
    prev = integral(n)
    for _ in range(SIMPSON_MAX_DOUBLINGS):
        n *= 2
        cur = integral(n)
        if abs(cur - prev) < SIMPSON_TOL:
            return first, second, cur
        prev = cur
    raise RuntimeError(f"Simpson quadrature did not converge after {SIMPSON_MAX_DOUBLINGS} doublings")


def duhamel_residual(env: Environment, f: LocalFunction, t: float, y: int, x: int = 0, law=None,
                     params=None) -> float:
    """``|d_y P_t f(x) - P_t d_y f(x) + int_0^t P_{t-s} h_s(x, y) ds|``."""
    first, second, integral = duhamel_terms(env, f, t, y, x, law, params)
    return abs(first - second + integral)


# ---------------------------------------------------------------------------
# ensembles over the law


def law_ensemble(law: ConductanceLaw, spec: LatticeSpec, n_env: int, master_seed: int = 0,
                 max_enumeration: int = ENUMERATION_LIMIT):
    """Environments and weights representing the law on the torus.

    Discrete laws small enough to enumerate return every configuration with
    its probability (weights sum to one); otherwise ``n_env`` replicas are
    sampled and the weights are ``None``.
    """
    atoms = law.atoms()
    if atoms is not None and len(atoms[0]) ** spec.n_edges <= max_enumeration:
        vals, wts = enumerate_assignments(law, spec.n_edges)
        return [Environment(spec, v, law) for v in vals], wts
    return [sample_environment(law, spec, master_seed, r) for r in range(n_env)], None


def _dirichlet_per_env(env: Environment, u: np.ndarray) -> np.ndarray:
    """``(1/N) sum_x sum_{|z|=1} omega_{x,x+z} (u(x+z) - u(x))^2`` for each row of ``u``."""
    spec = env.spec
    g = env.grids()
    out = np.zeros(len(u))
    for k, row in enumerate(u):
        q = row.reshape(spec.shape)
        out[k] = 2 * sum(np.sum(g[i] * (np.roll(q, -1, axis=i) - q) ** 2) for i in range(spec.d)) / spec.n_sites
    return out


@dataclass
class KeyLemmaReport:
    first_lhs: float  # sum_i E[(E^{(0)}[omega_{0,e_i} D_i f_s(0)])^2]
    second_lhs: float  # sum_i E[(omega_{0,e_i} E^{(0)}[D_i f_s(0)])^2]
    rhs: float  # -E[omega^2] d/ds E[f_s^2]
    margins: tuple[float, float]
    std_errors: tuple[float, float]
    exact: bool

    @property
    def holds(self) -> bool:
        tol = [1e-10] * 2 if self.exact else [3 * s for s in self.std_errors]
        return all(m >= -t for m, t in zip(self.margins, tol))


def lemmeclef_check(law: ConductanceLaw, f: LocalFunction, s: float, spec: LatticeSpec, n_env: int = 64,
                    master_seed: int = 0, scheme: VerticalDerivativeScheme | None = None,
                    params=None) -> KeyLemmaReport:
    """Both Cauchy-Schwarz bounds of the key lemma, with slack margins.

    The right side uses the exact Dirichlet form of ``f_s`` in each
    environment.  Small discrete tori are enumerated exactly.
    """
    if scheme is None:
        scheme = EXACT if law.atoms() is not None else VerticalDerivativeScheme("quadrature")
    f._check_fits(spec)
    envs, weights = law_ensemble(law, spec, n_env, master_seed)
    m2 = law.second_moment
    first = np.zeros(len(envs))
    second = np.zeros(len(envs))
    dirichlet = np.zeros(len(envs))
    for k, env in enumerate(envs):
        base, fields, cenvs, wts = _conditioned_fields(env, f, 0, [s], scheme, law, params)
        edges = env.star(0)
        for i in range(spec.d):
            nb = spec.shift(0, spec.unit(i))
            grads = fields[:, 0, nb] - fields[:, 0, 0]
            cond_w = np.array([e.w[edges[i]] for e in cenvs])
            first[k] += (wts @ (cond_w * grads)) ** 2
            second[k] += (env.w[edges[i]] * (wts @ grads)) ** 2
        dirichlet[k] = _dirichlet_per_env(env, base)[0]
    out = []
    for part in (first, second):
        mean, se = _mean_se(np.column_stack([part, m2 * dirichlet - part]), weights)
        out.append((mean, se))
    rhs = float(_mean_se(m2 * dirichlet, weights)[0])
    return KeyLemmaReport(
        float(out[0][0][0]),
        float(out[1][0][0]),
        rhs,
        (float(out[0][0][1]), float(out[1][0][1])),
        (float(out[0][1][1]), float(out[1][1][1])),
        weights is not None,
    )


key_lemma_check = lemmeclef_check


@dataclass
class DirichletReport:
    value: float  # d/ds E[f_s^2] from the Dirichlet form
    std_error: float
    finite_difference: float
    difference_se: float
    tolerance: float
    exact: bool

    @property
    def holds(self) -> bool:
        return abs(self.value - self.finite_difference) <= self.tolerance


def dirichlet_derivative(law: ConductanceLaw, f: LocalFunction, s: float, spec: LatticeSpec, n_env: int = 64,
                         master_seed: int = 0, step: float = 1e-3, params=None) -> DirichletReport:
    """``d/ds E[f_s^2] = -sum_{|z|=1} E[omega_{0,z} (f_s(z) - f_s(0))^2]``, cross-checked by finite differences.

    The finite difference is centred (one-sided second order for
    ``s < step``).  Its truncation error is bounded with
    ``|U'''| <= 8 (2 W_max)^3 U`` for ``U(s) = ||f_s||^2 / N``, giving the
    tolerance ``3 sigma + c step^2 mean(8 (2 W_max)^3 U)``.
    """
    f._check_fits(spec)
    envs, weights = law_ensemble(law, spec, n_env, master_seed)
    centred = s >= step
    times = [s, s - step, s + step] if centred else [s, s + step, s + 2 * step]
    value = np.zeros(len(envs))
    fd = np.zeros(len(envs))
    bound = np.zeros(len(envs))
    for k, env in enumerate(envs):
        u = propagate(env, local_field(f, env), times, params)[0]
        norms = np.sum(u**2, axis=1) / spec.n_sites
        value[k] = -_dirichlet_per_env(env, u[:1])[0]
        if centred:
            fd[k] = (norms[2] - norms[1]) / (2 * step)
            bound[k] = step**2 / 6 * 8 * (2 * env.exit_rates().max()) ** 3 * norms[1]
        else:
            fd[k] = (-3 * norms[0] + 4 * norms[1] - norms[2]) / (2 * step)
            bound[k] = step**2 / 3 * 8 * (2 * env.exit_rates().max()) ** 3 * norms[0]
    (v, dfd, b), (v_se, diff_se, _) = _mean_se(np.column_stack([value, fd - value, bound]), weights)
    tol = 3 * diff_se + b + 1e-12 * max(1.0, abs(v))
    return DirichletReport(float(v), float(v_se), float(v + dfd), float(diff_se), float(tol), weights is not None)


# ---------------------------------------------------------------------------
# fixed walk scheme: only the observable's environment is random


def _scheme_wmax(m: Environment) -> float:
    return float(m.w.max())


def _fixed_scheme_series(m: Environment, law: ConductanceLaw, f: LocalFunction, coeffs: np.ndarray, times,
                         n_env: int, master_seed: int, mode: str, meta: dict) -> DecaySeries:
    """``E_omega[(sum_x c_t(x) f(x, omega))^2]`` for coefficient rows ``c_t``."""
    spec = m.spec
    if mode == "exact":
        vals = _covariance_form(coeffs, local_covariance(f, law, spec), spec)
        se = np.zeros_like(vals)
    elif mode == "mc":
        samples = np.array([(coeffs @ local_field(f, sample_environment(law, spec, master_seed, r))) ** 2
                            for r in range(n_env)])
        vals, se = _mean_se(samples)
    else:
        raise ValueError("mode must be 'exact' or 'mc'")
    meta = dict(meta, law=law.spec_string(), observable=f.name, d=spec.d, L=spec.L, mode=mode,
                n_env=n_env if mode == "mc" else None, master_seed=master_seed,
                walk_scheme=m.law.spec_string() if m.law is not None else "given")
    return DecaySeries(times, vals, se, meta)


def fixed_scheme_divergence_decay(m: Environment, law: ConductanceLaw, g: LocalFunction, times, n_env: int = 256,
                                  master_seed: int = 0, direction: int = 1, mode: str = "exact",
                                  guard_factor: float | None = GUARD_FACTOR, params=None) -> DecaySeries:
    """``E_omega[(P_t^m D_i g(0, omega))^2]`` with the walk driven by the fixed environment ``m``.

    ``mode="exact"`` evaluates the expectation through the covariance of
    ``D_i g`` (which only couples overlapping translates); ``mode="mc"``
    averages over ``n_env`` sampled observable environments.
    """
    times = np.asarray(times, dtype=float)
    check_wraparound(m.spec, _scheme_wmax(m), float(times.max()), guard_factor)
    f = gradient_of(g, direction)
    f._check_fits(m.spec)
    rows = kernel_from(m, 0, times, params)
    return _fixed_scheme_series(m, law, f, rows, times, n_env, master_seed, mode,
                                {"quantity": "E[(P_t^m D_i g(0))^2]", "direction": direction})


def iterated_generator_decay(law: ConductanceLaw, g: LocalFunction, n: int, spec: LatticeSpec, times,
                             n_env: int = 256, master_seed: int = 0, scheme: Environment | None = None,
                             mode: str = "exact", workers: int = 1, guard_factor: float | None = GUARD_FACTOR,
                             params=None) -> DecaySeries:
    """Decay of ``E[(P_t L^n g)^2]``.

    Without ``scheme`` the walk and ``L`` both use the random environment, so
    this is :func:`estimate_variance_decay` on ``L^n g``.  With a fixed walk
    scheme ``m`` the function is ``(L^m)^n g`` and only ``g``'s environment
    is random; by symmetry of ``L^m``, ``P_t^m (L^m)^n g(0) = sum_x
    ((L^m)^n p_t^m(0, .))(x) g(x)``.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    times = np.asarray(times, dtype=float)
    if scheme is None:
        f = g
        for _ in range(n):
            f = generator_of(f)
        series = estimate_variance_decay(law, f, spec, times, n_env, master_seed, workers,
                                         guard_factor=guard_factor, params=params)
        series.metadata["iterations"] = n
        return series
    if scheme.spec != spec:
        raise ValueError("walk scheme lives on a different torus")
    _require_centered(g, law)
    check_wraparound(spec, _scheme_wmax(scheme), float(times.max()), guard_factor)
    rows = kernel_from(scheme, 0, times, params)
    for _ in range(n):
        rows = np.array([apply_generator(scheme, r) for r in rows])
    return _fixed_scheme_series(scheme, law, g, rows, times, n_env, master_seed, mode,
                                {"quantity": "E[(P_t^m (L^m)^n g(0))^2]", "iterations": n})
