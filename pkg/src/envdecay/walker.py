"""Event-driven simulation of the variable-speed random walk.

The walk holds at ``x`` for an exponential time of rate ``W(x)`` (the sum of
incident conductances) and then crosses edge ``{x, y}`` with probability
``omega_{x,y} / W(x)``.  Each walk ``k`` of replica ``r`` consumes its own
stream keyed by ``(seed, r, k)`` (plus a family tag), so results do not
depend on scheduling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .lattice import STREAM_WALK, Environment, LocalFunction, local_field, replica_generator

__all__ = ["JumpChain", "WalkState", "simulate_endpoint", "simulate_path", "sample_endpoints", "mc_ft"]


@dataclass(frozen=True, eq=False)
class JumpChain:
    """Embedded jump chain of an environment.

    ``cumulative[x, k]`` is the probability of taking one of the first
    ``k + 1`` moves out of ``x``; the last column is set to exactly 1.
    """

    neighbors: np.ndarray
    cumulative: np.ndarray
    rates: np.ndarray

    @classmethod
    def from_env(cls, env: Environment) -> "JumpChain":
        spec = env.spec
        nbr = spec.neighbor_table()
        g = env.grids()
        wts = np.empty((spec.n_sites, 2 * spec.d))
        for i in range(spec.d):
            wts[:, 2 * i] = g[i].ravel()
            wts[:, 2 * i + 1] = np.roll(g[i], 1, axis=i).ravel()
        rates = wts.sum(axis=1)
        cum = np.cumsum(wts / rates[:, None], axis=1)
        cum[:, -1] = 1.0
        return cls(nbr, cum, rates)

    def transition_matrix(self) -> np.ndarray:
        n = len(self.rates)
        probs = np.diff(self.cumulative, prepend=0.0, axis=1)
        out = np.zeros((n, n))
        for k in range(self.neighbors.shape[1]):
            np.add.at(out, (np.arange(n), self.neighbors[:, k]), probs[:, k])
        return out


@njit(cache=True)
def _walk(neighbors, cumulative, rates, x, horizon, u):
    """Run one walk on a pre-drawn stream of uniforms.

    Returns ``(position, jumps, used)``; ``used = -1`` means the stream ran
    out and the caller must retry with a longer one.
    """
    clock = 0.0
    k = 0
    jumps = 0
    n = u.shape[0]
    while True:
        if k >= n:
            return x, jumps, -1
        clock += -np.log1p(-u[k]) / rates[x]
        k += 1
        if clock > horizon:
            return x, jumps, k
        if k >= n:
            return x, jumps, -1
        r = u[k]
        k += 1
        j = 0
        while r >= cumulative[x, j]:
            j += 1
        x = neighbors[x, j]
        jumps += 1


def _run(chain: JumpChain, t: float, rng: np.random.Generator, start: int):
    n = max(16, int(4 * chain.rates.mean() * t) + 16)
    u = rng.random(n)
    while True:
        x, jumps, used = _walk(chain.neighbors, chain.cumulative, chain.rates, start, float(t), u)
        if used >= 0:
            return int(x), int(jumps)
        u = np.concatenate([u, rng.random(len(u))])


@dataclass
class WalkState:
    position: int
    clock: float = 0.0
    rng: np.random.Generator = field(default_factory=np.random.default_rng, repr=False)
    jumps: int = 0


def _chain(env) -> JumpChain:
    return env if isinstance(env, JumpChain) else JumpChain.from_env(env)


def simulate_endpoint(env: Environment | JumpChain, t: float, rng: np.random.Generator, start: int = 0) -> int:
    """Sample ``X_t`` for the walk started at ``start``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return _run(_chain(env), t, rng, start)[0]


def simulate_path(env: Environment | JumpChain, t: float, rng: np.random.Generator, start: int = 0):
    """Full trajectory up to ``t``: jump times and the positions entered.

    Consumes the stream exactly like :func:`simulate_endpoint`, so the last
    position matches the endpoint drawn from an identical generator.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    chain = _chain(env)
    state = WalkState(start, 0.0, rng)
    times, positions = [0.0], [start]
    while True:
        state.clock += -np.log1p(-state.rng.random()) / chain.rates[state.position]
        if state.clock > t:
            return np.array(times), np.array(positions)
        r = state.rng.random()
        j = int(np.searchsorted(chain.cumulative[state.position], r, side="right"))
        state.position = int(chain.neighbors[state.position, j])
        state.jumps += 1
        times.append(state.clock)
        positions.append(state.position)


def sample_endpoints(env: Environment, t: float, n_walks: int, seed: int, replica: int = 0,
                     start: int = 0, return_jumps: bool = False, key: tuple[int, ...] = ()):
    """Endpoints of ``n_walks`` independent walks.

    Walk ``k`` uses stream ``(seed, replica, STREAM_WALK, *key, k)``; distinct ``key``
    tuples give independent batches on the same environment.
    """
    chain = JumpChain.from_env(env)
    ends = np.empty(n_walks, dtype=np.int64)
    jumps = np.empty(n_walks, dtype=np.int64)
    for k in range(n_walks):
        ends[k], jumps[k] = _run(chain, t, replica_generator(seed, replica, STREAM_WALK, *key, k), start)
    return (ends, jumps) if return_jumps else ends


def mc_ft(env: Environment, f: LocalFunction, t: float, n_walks: int, seed: int = 0, replica: int = 0,
          key: tuple[int, ...] = ()):
    """Monte Carlo ``E_0[f(X_t, omega)]`` with its standard error."""
    if n_walks < 2:
        raise ValueError("need at least two walks")
    values = local_field(f, env)[sample_endpoints(env, t, n_walks, seed, replica, key=key)]
    if np.all(values == values[0]):
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(n_walks))
