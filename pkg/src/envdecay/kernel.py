"""Generator, semigroup and heat-kernel functionals on the torus.

``exp(tL)`` is evaluated by uniformization: with ``Lambda`` at least the
largest exit rate, ``Pi = I + L / Lambda`` is a stochastic matrix and

    exp(tL) v = sum_n Poisson(n; Lambda t) Pi^n v.

Both tails of the Poisson sum are cut at ``tail_tol / 2``; the dropped mass
is returned as ``deficit`` rather than renormalised away.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.stats import poisson

from .lattice import Environment, LatticeSpec

__all__ = [
    "ProbVector",
    "UniformizationParams",
    "apply_generator",
    "generator_matrix",
    "dense_generator",
    "propagate",
    "dense_propagate",
    "semigroup",
    "point_mass",
    "reversibility_check",
    "heat_kernel_l2",
    "return_probability",
    "heat_kernel_l2_derivatives",
    "gradient_l2",
    "weighted_gradient_l2",
    "DENSE_MAX_SITES",
]

DENSE_MAX_SITES = 216


@dataclass
class ProbVector:
    spec: LatticeSpec
    p: np.ndarray
    deficit: float = 0.0

    @property
    def total(self) -> float:
        return float(self.p.sum())

    def check(self, tol: float = 1e-12) -> None:
        if np.any(self.p < 0):
            raise ValueError("negative probability")
        if abs(self.total + self.deficit - 1.0) > tol:
            raise ValueError(f"mass {self.total} + deficit {self.deficit} != 1")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["site_index", "probability"])
            for k, v in enumerate(self.p):
                out.writerow([k, repr(float(v))])


def point_mass(spec: LatticeSpec, site: int = 0) -> ProbVector:
    p = np.zeros(spec.n_sites)
    p[site] = 1.0
    return ProbVector(spec, p, 0.0)


@dataclass(frozen=True)
class UniformizationParams:
    rate: float | None = None  # None: the environment's exact maximal exit rate
    tail_tol: float = 1e-12


def _as_vector(env: Environment, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (env.spec.n_sites,):
        raise ValueError(f"expected a vector of length {env.spec.n_sites}, got shape {v.shape}")
    return v


def apply_generator(env: Environment, v) -> np.ndarray:
    """``(Lv)(x) = sum_{|z|=1} omega_{x,x+z} (v(x+z) - v(x))``."""
    spec = env.spec
    v = _as_vector(env, v).reshape(spec.shape)
    g = env.grids()
    out = np.zeros(spec.shape)
    for i in range(spec.d):
        fwd = np.roll(v, -1, axis=i) - v  # D_i v(x)
        flux = g[i] * fwd  # omega_{x,x+e_i} D_i v(x)
        out += flux - np.roll(flux, 1, axis=i)
    return out.ravel()


def generator_matrix(env: Environment) -> sp.csr_matrix:
    """Sparse symmetric generator; rows sum to zero."""
    spec = env.spec
    idx = np.arange(spec.n_sites).reshape(spec.shape)
    rows, cols, vals = [], [], []
    g = env.grids()
    for i in range(spec.d):
        nb = np.roll(idx, -1, axis=i).ravel()
        w = g[i].ravel()
        rows += [idx.ravel(), nb]
        cols += [nb, idx.ravel()]
        vals += [w, w]
    off = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(spec.n_sites, spec.n_sites),
    )
    return (off - sp.diags(env.exit_rates())).tocsr()


def dense_generator(env: Environment) -> np.ndarray:
    """Dense generator assembled column by column from :func:`apply_generator`."""
    n = env.spec.n_sites
    if n > DENSE_MAX_SITES:
        raise ValueError(f"dense path limited to {DENSE_MAX_SITES} sites, torus has {n}")
    return np.column_stack([apply_generator(env, col) for col in np.eye(n)])


def dense_propagate(env: Environment, v, times) -> np.ndarray:
    """``exp(tL) v`` by eigendecomposition; the independent oracle for small tori."""
    lam, vec = np.linalg.eigh(dense_generator(env))
    coef = vec.T @ _as_vector(env, v)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    return np.array([vec @ (np.exp(lam * t) * coef) for t in times])


def _poisson_windows(means: np.ndarray, tol: float):
    """Per-mean ``(lo, hi, dropped mass)`` with each Poisson tail below ``tol / 2``."""
    means = np.asarray(means, dtype=float)
    pos = means > 0
    m = np.where(pos, means, 1.0)
    lo = np.where(pos, poisson.ppf(tol / 2, m), 0).astype(np.int64)
    while True:
        bad = pos & (lo > 0) & (poisson.cdf(lo - 1, m) > tol / 2)
        if not bad.any():
            break
        lo[bad] -= 1
    hi = np.where(pos, poisson.isf(tol / 2, m), 0).astype(np.int64)
    while True:
        bad = pos & (poisson.sf(hi, m) > tol / 2)
        if not bad.any():
            break
        hi[bad] += 1
    dropped = np.where(pos, np.where(lo > 0, poisson.cdf(lo - 1, m), 0.0) + poisson.sf(hi, m), 0.0)
    return lo, hi, dropped


def _poisson_window(mean: float, tol: float) -> tuple[int, np.ndarray, float]:
    """``(lo, weights[lo..hi], dropped mass)`` for a single mean."""
    lo, hi, dropped = _poisson_windows(np.array([mean]), tol)
    if mean == 0:
        return 0, np.ones(1), 0.0
    return int(lo[0]), poisson.pmf(np.arange(lo[0], hi[0] + 1), mean), float(dropped[0])


def jump_matrix(env: Environment, rate: float) -> sp.csr_matrix:
    return (sp.identity(env.spec.n_sites, format="csr") + generator_matrix(env) / rate).tocsr()


def _rate(env: Environment, params: UniformizationParams) -> float:
    max_exit = float(env.exit_rates().max())
    if params.rate is None:
        return max_exit
    if params.rate < max_exit * (1 - 1e-12):
        raise ValueError(f"uniformization rate {params.rate} below the maximal exit rate {max_exit}")
    return float(params.rate)


def propagate(env: Environment, v, times, params: UniformizationParams | None = None):
    """``exp(tL) v`` for every ``t`` in ``times`` in a single pass.

    Returns ``(values, deficits)`` with ``values`` of shape
    ``(len(times), n_sites)``.  ``L`` is symmetric, so the same call evolves
    a distribution forward and a function backward.
    """
    params = params or UniformizationParams()
    v = _as_vector(env, v)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times < 0):
        raise ValueError("times must be >= 0")
    rate = _rate(env, params)
    means = rate * times
    lo, hi, dropped = _poisson_windows(means, params.tail_tol)
    n_max = int(hi.max())
    ks = np.arange(n_max + 1)
    inside = (ks[None, :] >= lo[:, None]) & (ks[None, :] <= hi[:, None])
    weights = np.where(inside, poisson.pmf(ks[None, :], np.where(means > 0, means, 1.0)[:, None]), 0.0)
    weights[means == 0] = 0.0
    weights[means == 0, 0] = 1.0
    pi = jump_matrix(env, rate) if n_max > 0 else None
    block = max(1, min(n_max + 1, 4_000_000 // v.size))
    out = np.zeros((len(times), v.size))
    powers = np.empty((block, v.size))
    cur = v.copy()
    dense = len(times) > 8
    for start in range(0, n_max + 1, block):
        stop = min(start + block, n_max + 1)
        for n in range(start, stop):
            powers[n - start] = cur
            if n < n_max:
                cur = pi @ cur
        if dense:
            out += weights[:, start:stop] @ powers[: stop - start]
            continue
        for k in range(len(times)):
            a, b = max(int(lo[k]), start), min(int(hi[k]) + 1, stop)
            if a < b:
                out[k] += weights[k, a:b] @ powers[a - start : b - start]
    return out, dropped


def semigroup(env: Environment, t: float, init: ProbVector, params: UniformizationParams | None = None) -> ProbVector:
    """Law of ``X_t`` started from ``init``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    vals, deficit = propagate(env, init.p, [t], params)
    return ProbVector(env.spec, vals[0], init.deficit + float(deficit[0]))


def kernel_from(env: Environment, x: int, times, params=None) -> np.ndarray:
    """``P_x(X_t = .)`` for each time, shape ``(len(times), n_sites)``."""
    return propagate(env, point_mass(env.spec, x).p, times, params)[0]


def reversibility_check(env: Environment, t: float, x: int, y: int, params=None) -> float:
    """``|P_x(X_t = y) - P_y(X_t = x)|``."""
    pxy = kernel_from(env, x, [t], params)[0, y]
    pyx = kernel_from(env, y, [t], params)[0, x]
    return float(abs(pxy - pyx))


def _times(t):
    arr = np.atleast_1d(np.asarray(t, dtype=float))
    return arr, np.ndim(t) == 0


def heat_kernel_l2(env: Environment, t, params=None, origin: int = 0, check: float = 1e-9):
    """``sum_y P_0(X_t = y)^2``.

    The return probability ``P_0(X_{2t} = 0)`` is computed in the same pass
    and must agree to ``check``.
    """
    ts, scalar = _times(t)
    p = kernel_from(env, origin, np.concatenate([ts, 2 * ts]), params)
    l2 = np.sum(p[: len(ts)] ** 2, axis=1)
    ret = p[len(ts) :, origin]
    if check is not None and np.max(np.abs(l2 - ret)) > check:
        raise RuntimeError(f"heat kernel identity broken: {np.max(np.abs(l2 - ret)):.3e}")
    return float(l2[0]) if scalar else l2


def return_probability(env: Environment, t, params=None, origin: int = 0):
    ts, scalar = _times(t)
    ret = kernel_from(env, origin, ts, params)[:, origin]
    return float(ret[0]) if scalar else ret


def heat_kernel_l2_derivatives(env: Environment, t, params=None, origin: int = 0):
    """``(u, u', u'')`` for ``u(t) = ||p_t||^2``: ``u' = 2<Lp, p>``, ``u'' = 4||Lp||^2``."""
    ts, _ = _times(t)
    p = kernel_from(env, origin, ts, params)
    lp = np.array([apply_generator(env, row) for row in p])
    return np.sum(p**2, axis=1), 2 * np.sum(lp * p, axis=1), 4 * np.sum(lp**2, axis=1)


def _edge_differences(env: Environment, p: np.ndarray) -> list[np.ndarray]:
    q = p.reshape(env.spec.shape)
    return [np.roll(q, -1, axis=i) - q for i in range(env.spec.d)]


def gradient_l2(env: Environment, t, params=None, origin: int = 0):
    """``sum_{y, |z|=1} (p_t(0,y) - p_t(0,y+z))^2`` over ordered pairs ``(y, z)``."""
    ts, scalar = _times(t)
    p = kernel_from(env, origin, ts, params)
    out = np.array([2 * sum(np.sum(dq**2) for dq in _edge_differences(env, row)) for row in p])
    return float(out[0]) if scalar else out


def weighted_gradient_l2(env: Environment, t, params=None, origin: int = 0):
    """Conductance-weighted gradient sum; equals ``-d/dt heat_kernel_l2``."""
    ts, scalar = _times(t)
    p = kernel_from(env, origin, ts, params)
    g = env.grids()
    out = np.array([2 * sum(np.sum(g[i] * dq**2) for i, dq in enumerate(_edge_differences(env, row))) for row in p])
    return float(out[0]) if scalar else out
