"""Torus geometry, conductance laws, environments and local observables.

The torus ``(Z/LZ)^d`` stands in for the infinite lattice.  Sites are
indexed in C order; the edge ``{x, x + e_i}`` (``i`` a positive direction)
is owned by ``x`` and carries index ``i * L**d + x``.  An environment is a
flat array of conductances in that edge order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Sequence

import numpy as np
from scipy.special import roots_legendre

__all__ = [
    "LatticeSpec",
    "ConductanceLaw",
    "Dirac",
    "Uniform",
    "TwoPoint",
    "Pareto",
    "parse_law",
    "Environment",
    "sample_environment",
    "translate",
    "replica_generator",
    "enumerate_assignments",
    "constant_function",
    "STREAM_WALK",
    "STREAM_SCHEME",
    "STREAM_RESAMPLE",
    "STREAM_MC",
    "LocalFunction",
    "eval_local",
    "local_field",
    "single_edge",
    "origin_star",
    "generator_of",
    "gradient_of",
    "observable",
    "OBSERVABLES",
]


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class LatticeSpec:
    """The discrete torus of side ``L`` in dimension ``d``."""

    d: int
    L: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be >= 1, got {self.d}")
        if self.L < 3:
            raise ValueError(f"torus side must be >= 3, got {self.L}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.L,) * self.d

    @property
    def n_sites(self) -> int:
        return self.L**self.d

    @property
    def n_edges(self) -> int:
        return self.d * self.L**self.d

    def site_index(self, coords) -> int | np.ndarray:
        """Index of the site(s) with the given coordinates, wrapped onto the torus."""
        coords = np.asarray(coords)
        if coords.shape[-1] != self.d:
            raise ValueError(f"expected {self.d} coordinates, got shape {coords.shape}")
        idx = np.ravel_multi_index(tuple(np.moveaxis(coords, -1, 0)), self.shape, mode="wrap")
        return int(idx) if np.ndim(idx) == 0 else idx

    def site_coords(self, index) -> np.ndarray:
        return np.stack(np.unravel_index(index, self.shape), axis=-1)

    def edge_index(self, site, direction: int) -> int | np.ndarray:
        if not 0 <= direction < self.d:
            raise ValueError(f"direction must be in [0, {self.d}), got {direction}")
        return direction * self.n_sites + np.asarray(site)

    def edge_of(self, index: int) -> tuple[int, int]:
        """``(owner site, direction)`` of an edge index."""
        direction, site = divmod(int(index), self.n_sites)
        return site, direction

    def shift(self, site, offset) -> int | np.ndarray:
        """Site ``x + offset`` on the torus."""
        return self.site_index(self.site_coords(site) + np.asarray(offset))

    def unit(self, i: int) -> tuple[int, ...]:
        e = [0] * self.d
        e[i] = 1
        return tuple(e)

    def neighbor_table(self) -> np.ndarray:
        """``(n_sites, 2d)`` array; column ``2i`` is ``x + e_i``, ``2i + 1`` is ``x - e_i``."""
        idx = np.arange(self.n_sites).reshape(self.shape)
        cols = []
        for i in range(self.d):
            cols.append(np.roll(idx, -1, axis=i).ravel())
            cols.append(np.roll(idx, 1, axis=i).ravel())
        return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# conductance laws


class ConductanceLaw:
    """A law on ``[1, inf)`` sampled by inverse transform, one uniform per edge."""

    name: str = ""

    def ppf(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def mean(self) -> float:
        raise NotImplementedError

    @property
    def second_moment(self) -> float:
        raise NotImplementedError

    @property
    def variance(self) -> float:
        return self.second_moment - self.mean**2

    def quantile(self, q: float) -> float:
        return float(self.ppf(np.asarray([q]))[0])

    def atoms(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Values and probabilities for discrete laws, ``None`` otherwise."""
        return None

    def quadrature(self, q: int = 8) -> tuple[np.ndarray, np.ndarray]:
        """Fixed nodes and weights for ``E[phi(omega)]``.

        Discrete laws return their atoms.  Continuous laws use Gauss-Legendre
        nodes in the uniform variable pushed through the quantile function.
        """
        atoms = self.atoms()
        if atoms is not None:
            return atoms
        u, w = roots_legendre(q)
        return self.ppf(0.5 * (u + 1.0)), 0.5 * w

    def spec_string(self) -> str:
        raise NotImplementedError

    def __repr__(self):
        return self.spec_string()


@dataclass(frozen=True, repr=False)
class Dirac(ConductanceLaw):
    value: float = 1.0
    name = "dirac"

    def __post_init__(self):
        if self.value < 1:
            raise ValueError("Dirac conductance must be >= 1")

    def ppf(self, u):
        return np.full(np.shape(u), float(self.value))

    @property
    def mean(self):
        return float(self.value)

    @property
    def second_moment(self):
        return float(self.value) ** 2

    @property
    def variance(self):
        return 0.0

    def atoms(self):
        return np.array([float(self.value)]), np.array([1.0])

    def spec_string(self):
        return f"dirac:{self.value:g}"


@dataclass(frozen=True, repr=False)
class Uniform(ConductanceLaw):
    """Uniform on ``[1, b]``."""

    b: float = 2.0
    name = "uniform"

    def __post_init__(self):
        if not self.b > 1:
            raise ValueError(f"Uniform(1, b) needs b > 1, got {self.b}")

    def ppf(self, u):
        return 1.0 + (self.b - 1.0) * np.asarray(u, dtype=float)

    @property
    def mean(self):
        return 0.5 * (1.0 + self.b)

    @property
    def second_moment(self):
        return (self.b**3 - 1.0) / (3.0 * (self.b - 1.0))

    @property
    def variance(self):
        return (self.b - 1.0) ** 2 / 12.0

    def spec_string(self):
        return f"uniform:{self.b:g}"


@dataclass(frozen=True, repr=False)
class TwoPoint(ConductanceLaw):
    """``omega = kappa`` with probability ``p`` and ``omega = 1`` otherwise."""

    kappa: float = 3.0
    p: float = 0.5
    name = "twopoint"

    def __post_init__(self):
        if self.kappa < 1:
            raise ValueError(f"TwoPoint needs kappa >= 1, got {self.kappa}")
        if not 0 < self.p < 1:
            raise ValueError(f"TwoPoint needs p in (0, 1), got {self.p}")

    def ppf(self, u):
        return np.where(np.asarray(u) >= 1.0 - self.p, float(self.kappa), 1.0)

    @property
    def mean(self):
        return 1.0 + (self.kappa - 1.0) * self.p

    @property
    def second_moment(self):
        return 1.0 + (self.kappa**2 - 1.0) * self.p

    @property
    def variance(self):
        return (self.kappa - 1.0) ** 2 * self.p * (1.0 - self.p)

    def atoms(self):
        return np.array([1.0, float(self.kappa)]), np.array([1.0 - self.p, self.p])

    def spec_string(self):
        return f"twopoint:1,{self.kappa:g},{self.p:g}"


@dataclass(frozen=True, repr=False)
class Pareto(ConductanceLaw):
    """Pareto law with minimum 1 and tail exponent ``shape``."""

    shape: float = 2.5
    name = "pareto"

    def __post_init__(self):
        if not self.shape > 2:
            raise ValueError(f"Pareto needs shape > 2 for a finite second moment, got {self.shape}")

    def ppf(self, u):
        return (1.0 - np.asarray(u, dtype=float)) ** (-1.0 / self.shape)

    @property
    def mean(self):
        return self.shape / (self.shape - 1.0)

    @property
    def second_moment(self):
        return self.shape / (self.shape - 2.0)

    def spec_string(self):
        return f"pareto:{self.shape:g}"


def parse_law(text: str) -> ConductanceLaw:
    """Parse ``dirac:1``, ``uniform:B``, ``twopoint:1,KAPPA,P`` or ``pareto:S``."""
    kind, _, args = text.strip().lower().partition(":")
    vals = [float(a) for a in args.split(",") if a.strip()] if args else []
    try:
        if kind == "dirac":
            return Dirac(*(vals or [1.0]))
        if kind == "uniform":
            if len(vals) == 2:
                if vals[0] != 1:
                    raise ValueError("uniform law must start at 1")
                vals = vals[1:]
            return Uniform(*vals)
        if kind == "twopoint":
            if len(vals) == 3:
                if vals[0] != 1:
                    raise ValueError("two-point law must have its low value at 1")
                vals = vals[1:]
            return TwoPoint(*vals)
        if kind == "pareto":
            return Pareto(*(vals or [2.5]))
    except TypeError as exc:
        raise ValueError(f"bad parameters for law {text!r}") from exc
    raise ValueError(f"unknown conductance law {text!r}")


# ---------------------------------------------------------------------------
# environments


@dataclass(frozen=True, eq=False)
class Environment:
    spec: LatticeSpec
    w: np.ndarray
    law: ConductanceLaw | None = None
    seed: int | None = None
    replica: int = 0

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.shape != (self.spec.n_edges,):
            raise ValueError(f"expected {self.spec.n_edges} conductances, got shape {w.shape}")
        if np.any(w < 1):
            raise ValueError("conductances must be >= 1")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "w", w)

    @classmethod
    def constant(cls, spec: LatticeSpec, value: float = 1.0) -> "Environment":
        return cls(spec, np.full(spec.n_edges, float(value)), Dirac(value), None)

    def grids(self) -> np.ndarray:
        """Conductances as a ``(d, L, ..., L)`` array; ``[i][x]`` is the edge ``{x, x + e_i}``."""
        return self.w.reshape((self.spec.d,) + self.spec.shape)

    def exit_rates(self) -> np.ndarray:
        g = self.grids()
        total = np.zeros(self.spec.shape)
        for i in range(self.spec.d):
            total += g[i] + np.roll(g[i], 1, axis=i)
        return total.ravel()

    def with_edges(self, edges: Sequence[int], values: Sequence[float]) -> "Environment":
        w = self.w.copy()
        w[np.asarray(edges, dtype=int)] = values
        return Environment(self.spec, w, self.law, self.seed, self.replica)

    def star(self, site: int) -> np.ndarray:
        """Edge indices of ``a(site)``: the ``d`` positive-direction edges owned by the site."""
        return np.array([self.spec.edge_index(site, i) for i in range(self.spec.d)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["edge_index", "value"])
            for e, v in enumerate(self.w):
                out.writerow([e, repr(float(v))])

    @classmethod
    def from_csv(cls, path, spec: LatticeSpec, law=None, seed=None) -> "Environment":
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        w = np.empty(spec.n_edges)
        w[data[:, 0].astype(int)] = data[:, 1]
        return cls(spec, w, law, seed)

    def to_binary(self, path) -> None:
        np.asarray(self.w, dtype="<f8").tofile(path)

    @classmethod
    def from_binary(cls, path, spec: LatticeSpec, law=None, seed=None) -> "Environment":
        return cls(spec, np.fromfile(path, dtype="<f8"), law, seed)


# first extra key word of each stream family; observable environments use no extra words
STREAM_WALK = 1
STREAM_SCHEME = 2
STREAM_RESAMPLE = 3
STREAM_MC = 4


def replica_generator(seed: int, replica: int = 0, *extra: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, replica, *extra)``.

    The key length is part of the entropy: ``SeedSequence`` pads with zeros,
    so without it ``(s, r)`` and ``(s, r, 0)`` would name the same stream.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, replica, len(extra), *extra])))


def sample_environment(law: ConductanceLaw, spec: LatticeSpec, seed: int, replica: int = 0,
                       key: tuple[int, ...] = ()) -> Environment:
    """Draw i.i.d. conductances for every edge of the torus.

    Edge ``e`` consumes the ``e``-th double of a Philox stream keyed by
    ``(seed, replica, *key)``, so the value on an edge does not depend on how
    many other edges are drawn or in which order.  Observable environments
    use the empty key; a fixed walk scheme uses ``(STREAM_SCHEME,)``.
    """
    u = replica_generator(seed, replica, *key).random(spec.n_edges)
    return Environment(spec, law.ppf(u), law, seed, replica)


def translate(env: Environment, z) -> Environment:
    """``(theta_z omega)_{x, y} = omega_{x + z, y + z}``."""
    z = np.asarray(z, dtype=int)
    if z.shape != (env.spec.d,):
        raise ValueError(f"offset must have {env.spec.d} components")
    g = np.roll(env.grids(), tuple(-z), axis=tuple(range(1, env.spec.d + 1)))
    return Environment(env.spec, g.ravel(), env.law, env.seed, env.replica)


# ---------------------------------------------------------------------------
# local translation-invariant observables

Edge = tuple[tuple[int, ...], int]  # (site offset, positive direction)


@dataclass(frozen=True, eq=False)
class LocalFunction:
    """A translation-invariant observable given by ``f(0, .)`` on finitely many edges.

    ``raw`` receives an array of shape ``(len(support), ...)`` holding the
    conductances on the support edges (in support order) and returns the
    value(s).  ``shift`` is subtracted from ``raw``; centred observables set
    it to the exact mean of ``raw`` under their law.
    """

    name: str
    support: tuple[Edge, ...]
    raw: Callable[[np.ndarray], np.ndarray]
    shift: float = 0.0
    centered: bool = False
    d: int = field(default=0)

    def __post_init__(self):
        support = tuple((tuple(int(c) for c in z), int(i)) for z, i in self.support)
        object.__setattr__(self, "support", support)
        if support and not self.d:
            object.__setattr__(self, "d", len(support[0][0]))

    def evaluate(self, values: np.ndarray) -> np.ndarray:
        return self.raw(np.asarray(values, dtype=float)) - self.shift

    def support_sites(self) -> np.ndarray:
        """Distinct sites touched by the support edges (both endpoints)."""
        pts = set()
        for z, i in self.support:
            pts.add(z)
            e = list(z)
            e[i] += 1
            pts.add(tuple(e))
        return np.array(sorted(pts), dtype=int).reshape(-1, self.d)

    @property
    def supp_size(self) -> int:
        return len(self.support_sites())

    def diameter(self) -> int:
        pts = self.support_sites()
        if len(pts) == 0:
            return 0
        return int((pts.max(axis=0) - pts.min(axis=0)).max())

    def scaled(self, c: float) -> "LocalFunction":
        return LocalFunction(f"{c:g}*{self.name}", self.support, _Scaled(self, c), 0.0, self.centered, self.d)

    def _check_fits(self, spec: LatticeSpec) -> None:
        if self.d and self.d != spec.d:
            raise ValueError(f"observable {self.name} lives in d={self.d}, torus has d={spec.d}")
        if self.diameter() >= spec.L:
            raise ValueError(
                f"support of {self.name} (diameter {self.diameter()}) does not fit in a torus of side {spec.L}"
            )


def _support_edge_indices(f: LocalFunction, spec: LatticeSpec, y: int) -> np.ndarray:
    return np.array([spec.edge_index(spec.shift(y, z), i) for z, i in f.support], dtype=int)


def eval_local(f: LocalFunction, env: Environment, y: int = 0) -> float:
    """``f(y, omega) = f(0, theta_y omega)``."""
    f._check_fits(env.spec)
    vals = env.w[_support_edge_indices(f, env.spec, y)]
    return float(f.evaluate(vals))


def local_field(f: LocalFunction, env: Environment) -> np.ndarray:
    """``y -> f(y, omega)`` for every site of the torus, as a flat array."""
    f._check_fits(env.spec)
    if not f.support:
        return np.full(env.spec.n_sites, float(f.evaluate(np.empty((0,)))))
    g = env.grids()
    axes = tuple(range(env.spec.d))
    vals = np.stack([np.roll(g[i], tuple(-c for c in z), axis=axes).ravel() for z, i in f.support])
    return np.asarray(f.evaluate(vals), dtype=float)


# evaluators are module-level classes so observables pickle into worker processes


class _EdgeValue:
    def __call__(self, v):
        return v[0]


class _Sum:
    def __call__(self, v):
        return v.sum(axis=0)


class _Constant:
    def __init__(self, c):
        self.c = float(c)

    def __call__(self, v):
        return np.full(np.shape(v)[1:], self.c)


class _Scaled:
    def __init__(self, f, c):
        self.f, self.c = f, float(c)

    def __call__(self, v):
        return self.c * self.f.evaluate(v)


class _Generator:
    """``(L g)(0) = sum_{|z|=1} omega_{0,z} (g(z) - g(0))`` on the combined support."""

    def __init__(self, g, star_idx, shifted_idx, base_idx):
        self.g, self.star_idx, self.shifted_idx, self.base_idx = g, star_idx, shifted_idx, base_idx

    def __call__(self, v):
        g0 = self.g.evaluate(v[self.base_idx])
        out = 0.0
        for k, idx in zip(self.star_idx, self.shifted_idx):
            out = out + v[k] * (self.g.evaluate(v[idx]) - g0)
        return out


class _Gradient:
    def __init__(self, g, shifted_idx, base_idx):
        self.g, self.shifted_idx, self.base_idx = g, shifted_idx, base_idx

    def __call__(self, v):
        return self.g.evaluate(v[self.shifted_idx]) - self.g.evaluate(v[self.base_idx])


def _shift_support(support, z):
    return tuple((tuple(a + b for a, b in zip(s, z)), i) for s, i in support)


def _merge(*supports):
    out: list[Edge] = []
    seen = set()
    for sup in supports:
        for e in sup:
            if e not in seen:
                seen.add(e)
                out.append(e)
    return tuple(out)


def single_edge(law: ConductanceLaw, d: int, direction: int = 0) -> LocalFunction:
    """``F1``: the conductance of ``{0, e_direction}`` minus its mean."""
    zero = (0,) * d
    return LocalFunction("F1", ((zero, direction),), _EdgeValue(), law.mean, True, d)


def origin_star(law: ConductanceLaw, d: int) -> LocalFunction:
    """``F2``: centred sum of the ``2d`` conductances at the origin."""
    zero = (0,) * d
    sup = []
    for i in range(d):
        sup.append((zero, i))
        back = [0] * d
        back[i] = -1
        sup.append((tuple(back), i))
    return LocalFunction("F2", tuple(sup), _Sum(), 2 * d * law.mean, True, d)


def generator_of(g: LocalFunction) -> LocalFunction:
    """The local function ``L^omega g``; exactly centred for any ``g``."""
    d = g.d
    zero = (0,) * d
    star = []
    shifts = []
    for i in range(d):
        fwd = [0] * d
        fwd[i] = 1
        bwd = [0] * d
        bwd[i] = -1
        star.append((zero, i))  # omega_{0, e_i}
        shifts.append(tuple(fwd))
        star.append((tuple(bwd), i))  # omega_{0, -e_i} = omega_{-e_i, 0}
        shifts.append(tuple(bwd))
    support = _merge(tuple(star), g.support, *(_shift_support(g.support, z) for z in shifts))
    pos = {e: k for k, e in enumerate(support)}
    star_idx = [pos[e] for e in star]
    shifted_idx = [np.array([pos[e] for e in _shift_support(g.support, z)], dtype=int) for z in shifts]
    base_idx = np.array([pos[e] for e in g.support], dtype=int)
    return LocalFunction(f"L({g.name})", support, _Generator(g, star_idx, shifted_idx, base_idx), 0.0, True, d)


def gradient_of(g: LocalFunction, i: int) -> LocalFunction:
    """``D_i g(0) = g(e_i) - g(0)`` for ``i`` in ``+-1..+-d`` (signed, 1-based as in ``D_i``)."""
    d = g.d
    if i == 0 or abs(i) > d:
        raise ValueError(f"direction must be in +-1..+-{d}")
    z = [0] * d
    z[abs(i) - 1] = 1 if i > 0 else -1
    shifted = _shift_support(g.support, tuple(z))
    support = _merge(g.support, shifted)
    pos = {e: k for k, e in enumerate(support)}
    return LocalFunction(
        f"D{i}({g.name})",
        support,
        _Gradient(g, np.array([pos[e] for e in shifted], dtype=int), np.array([pos[e] for e in g.support], dtype=int)),
        0.0,
        True,
        d,
    )


def constant_function(c: float, d: int) -> LocalFunction:
    return LocalFunction(f"const({c:g})", (), _Constant(c), 0.0, c == 0, d)


OBSERVABLES = ("F1", "F2", "F3", "F4", "FD")


def observable(name: str, law: ConductanceLaw, d: int) -> LocalFunction:
    """Canonical observables by id: F1, F2, F3 = L F1, F4 = L^2 F1, FD = D_1 F1."""
    name = name.upper()
    if name == "F1":
        return single_edge(law, d)
    if name == "F2":
        return origin_star(law, d)
    if name == "F3":
        return generator_of(single_edge(law, d))
    if name == "F4":
        return generator_of(generator_of(single_edge(law, d)))
    if name == "FD":
        return gradient_of(single_edge(law, d), 1)
    raise ValueError(f"unknown observable {name!r}; choose from {', '.join(OBSERVABLES)}")


def enumerate_assignments(law: ConductanceLaw, k: int, q: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product nodes for ``k`` independent edges: values ``(M, k)`` and weights ``(M,)``."""
    vals, wts = law.quadrature(q)
    combos = np.array(list(product(range(len(vals)), repeat=k)), dtype=int).reshape(-1, k)
    return vals[combos], np.prod(wts[combos], axis=1) if k else np.ones(1)
