from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from envdecay.analysis import fit_power_law
from envdecay.kernel import dense_propagate
from envdecay.lattice import (
    Dirac,
    Environment,
    LatticeSpec,
    LocalFunction,
    TwoPoint,
    Uniform,
    constant_function,
    enumerate_assignments,
    eval_local,
    local_field,
    observable,
    sample_environment,
    single_edge,
)
from envdecay.variance import (
    EXACT,
    DecaySeries,
    VerticalDerivativeScheme,
    WraparoundError,
    case_table_residual,
    check_wraparound,
    compute_h_g,
    dirichlet_derivative,
    duhamel_residual,
    duhamel_terms,
    efron_stein_check,
    estimate_variance_decay,
    exact_ft,
    fixed_scheme_divergence_decay,
    h_field,
    intermediate_identity_residual,
    iterated_generator_decay,
    law_ensemble,
    key_lemma_check,
    vertical_derivative,
    wraparound_tmax,
)

TP = TwoPoint(3.0, 0.5)
SMALL = LatticeSpec(1, 5)


def edge_functional(spec, site, i=0):
    e = spec.edge_index(site, i)
    return lambda env: env.w[e]


# wraparound guard

def test_guard_refuses_long_times():
    spec = LatticeSpec(2, 64)
    tmax = wraparound_tmax(spec, 1.0)
    assert tmax == pytest.approx(64**2 / (64 * 4))
    check_wraparound(spec, 1.0, tmax)
    with pytest.raises(WraparoundError):
        check_wraparound(spec, 1.0, tmax * 1.01)
    check_wraparound(spec, 1.0, 1e6, None)


def test_exact_ft_refuses_instead_of_warning():
    env = sample_environment(TP, LatticeSpec(1, 16), 0)
    with pytest.raises(WraparoundError):
        exact_ft(env, observable("F1", TP, 1), 10.0)


# f_t

def test_exact_ft_trivial_cases():
    env = sample_environment(TP, LatticeSpec(2, 16), 3)
    f = observable("F2", TP, 2)
    assert exact_ft(env, f, 0.0) == eval_local(f, env, 0)
    assert exact_ft(env, constant_function(2.5, 2), 1.0, guard_factor=None) == pytest.approx(2.5, abs=1e-12)


def test_exact_ft_against_dense_oracle():
    env = sample_environment(TP, LatticeSpec(2, 6), 3)
    f = observable("F3", TP, 2)
    oracle = dense_propagate(env, local_field(f, env), [1.7])[0][0]
    assert exact_ft(env, f, 1.7, guard_factor=None) == pytest.approx(oracle, abs=1e-12)


# variance decay

def test_time_zero_is_law_variance():
    s = estimate_variance_decay(TP, observable("F1", TP, 2), LatticeSpec(2, 16), [0.0, 1.0], 64,
                                guard_factor=None)
    assert abs(s.values[0] - TP.variance) <= 3 * s.std_errors[0] + 1e-12


def test_translation_average_has_the_right_expectation():
    # over the full two-point ensemble of d=1, L=5 the torus average and the origin value have equal means
    f = observable("F2", TP, 1)
    envs, wts = law_ensemble(TP, SMALL, 0)
    assert len(envs) == 32 and wts.sum() == pytest.approx(1.0)
    for t in [0.5, 2.0]:
        origin = sum(w * exact_ft(e, f, t, guard_factor=None) ** 2 for e, w in zip(envs, wts))
        avg = sum(w * np.mean(dense_propagate(e, local_field(f, e), [t])[0] ** 2) for e, w in zip(envs, wts))
        assert origin == pytest.approx(avg, abs=1e-12)


def test_non_centered_rejected():
    spec = LatticeSpec(1, 16)
    raw = LocalFunction("edge", (((0,), 0),), single_edge(TP, 1).raw, 0.0, False, 1)
    with pytest.raises(ValueError):
        estimate_variance_decay(TP, raw, spec, [0.0, 1.0], 4)
    with pytest.raises(ValueError):
        estimate_variance_decay(TP, constant_function(1.0, 1), spec, [0.0, 1.0], 4)


def test_dirac_law_centered_observable_is_identically_zero():
    s = estimate_variance_decay(Dirac(1.0), observable("F1", Dirac(1.0), 1), LatticeSpec(1, 32), [0, 1, 2], 3)
    assert np.all(s.values == 0.0)


def test_series_is_monotone_convex_and_scales():
    spec = LatticeSpec(2, 32)
    f = observable("F1", TP, 2)
    times = [0.0, 1.0, 2.0, 4.0, 8.0]
    s = estimate_variance_decay(TP, f, spec, times, 24, derivatives=True, guard_factor=None)
    assert np.all(s.values >= 0)
    assert len(s.increases()) == 0
    assert np.all(s.first_derivative <= 0) and np.all(s.second_derivative >= 0)
    # second difference on the uneven grid
    t, v = s.times, s.values
    slopes = np.diff(v) / np.diff(t)
    assert np.all(np.diff(slopes) >= -3 * np.max(s.std_errors))
    doubled = estimate_variance_decay(TP, f.scaled(2.0), spec, times, 24, guard_factor=None)
    assert np.array_equal(doubled.values, 4 * s.values)


def test_exact_derivatives_match_finite_differences():
    spec = LatticeSpec(1, 64)
    f = observable("F1", TP, 1)
    h = 1e-4
    s = estimate_variance_decay(TP, f, spec, [2.0 - h, 2.0, 2.0 + h], 8, derivatives=True)
    fd = (s.values[2] - s.values[0]) / (2 * h)
    assert fd == pytest.approx(s.first_derivative[1], rel=1e-6)


def test_mc_inner_agrees_with_exact():
    spec = LatticeSpec(1, 32)
    f = observable("F1", TP, 1)
    exact = estimate_variance_decay(TP, f, spec, [1.0, 3.0], 200, guard_factor=None)
    mc = estimate_variance_decay(TP, f, spec, [1.0, 3.0], 200, inner="mc", n_walks=200, guard_factor=None)
    err = np.hypot(exact.std_errors, mc.std_errors)
    assert np.all(np.abs(exact.values - mc.values) <= 3 * err)


def test_determinism_across_workers(tmp_path):
    spec = LatticeSpec(2, 16)
    f = observable("F2", TP, 2)
    a = estimate_variance_decay(TP, f, spec, [0, 1, 2, 4], 12, master_seed=3, workers=1, guard_factor=None)
    b = estimate_variance_decay(TP, f, spec, [0, 1, 2, 4], 12, master_seed=3, workers=3, guard_factor=None)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_series_csv_round_trip(tmp_path):
    s = DecaySeries([0.0, 1.0], [1.0, 0.5], [0.1, 0.05], {"law": "x"})
    s.to_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text() == "t,value,std_error\n0.0,1.0,0.1\n1.0,0.5,0.05\n"
    back = DecaySeries.from_csv(tmp_path / "s.csv")
    assert np.array_equal(back.values, s.values)
    s.write_sidecar(tmp_path / "s.json")
    assert '"law": "x"' in (tmp_path / "s.json").read_text()
    with pytest.raises(ValueError):
        DecaySeries([0.0], [1.0, 2.0], [0.0])


# vertical derivatives

def test_vertical_derivative_read_off():
    spec = SMALL
    env = Environment(spec, np.array([3.0, 1.0, 1.0, 1.0, 1.0]), TP)
    assert vertical_derivative(edge_functional(spec, 0), env, 0) == 1.0
    assert vertical_derivative(edge_functional(spec, 2), env, 0) == 0.0


def test_vertical_derivative_tower_property():
    spec = SMALL
    f = observable("F3", TP, 1)
    F = lambda e: exact_ft(e, f, 0.7, guard_factor=None)
    envs, wts = law_ensemble(TP, spec, 0)
    for y in range(spec.n_sites):
        mean = sum(w * vertical_derivative(F, e, y) for e, w in zip(envs, wts))
        assert abs(mean) < 1e-12


def test_scheme_law_mismatch():
    env = sample_environment(Uniform(3.0), SMALL, 0)
    with pytest.raises(ValueError):
        vertical_derivative(edge_functional(SMALL, 0), env, 0, EXACT)
    with pytest.raises(ValueError):
        VerticalDerivativeScheme("bogus")


@pytest.mark.parametrize("scheme", [VerticalDerivativeScheme("quadrature"), VerticalDerivativeScheme("resample", samples=4000)])
def test_continuous_schemes_reproduce_means(scheme):
    law = Uniform(3.0)
    env = sample_environment(law, LatticeSpec(2, 5), 0)
    # a(y)-independent functional: exactly zero
    assert vertical_derivative(edge_functional(env.spec, 7), env, 0, scheme) == 0.0
    # the conditioned edge itself: F - E[omega]
    F = edge_functional(env.spec, 0)
    tol = 1e-10 if scheme.mode == "quadrature" else 4 * np.sqrt(law.variance / 4000)
    assert vertical_derivative(F, env, 0, scheme) == pytest.approx(env.w[0] - law.mean, abs=tol)


# Efron-Stein

def test_efron_stein_additive_equality():
    r = efron_stein_check(lambda x: x.sum(axis=1), TP, n=6)
    assert r.exact and r.lhs == pytest.approx(r.rhs, abs=1e-12)


def test_efron_stein_product_of_centered_variables():
    r = efron_stein_check(lambda x: (x[:, 0] - 2) * (x[:, 1] - 2), TP, n=2)
    assert r.rhs == pytest.approx(2 * r.lhs, abs=1e-12)


def test_efron_stein_random_multilinear_functionals():
    rng = np.random.default_rng(1)
    subsets = np.array([[(m >> i) & 1 for i in range(8)] for m in range(256)], dtype=bool)
    for _ in range(1000):
        c = rng.standard_normal(256)
        F = lambda x, c=c: np.prod(np.where(subsets[None], x[:, None, :] - 2, 1.0), axis=2) @ c
        assert efron_stein_check(F, TP, n=8).slack >= -1e-10


@given(coef=st.lists(st.floats(-5, 5), min_size=16, max_size=16), p=st.floats(0.05, 0.95))
def test_efron_stein_property(coef, p):
    law = TwoPoint(4.0, p)
    table = np.array(coef).reshape(2, 2, 2, 2)
    F = lambda x: table[tuple((x[:, i] > 1).astype(int) for i in range(4))]
    assert efron_stein_check(F, law, n=4).holds


def test_efron_stein_monte_carlo():
    r = efron_stein_check(lambda x: np.sin(x[:, 0] * x[:, 1]) + x[:, 2] ** 2, Uniform(3.0), n=3, n_samples=40000)
    assert not r.exact and r.holds and r.std_error > 0


# h_s and g_s

def test_case_table_and_dirac():
    env = sample_environment(TP, SMALL, 4)
    f = observable("F1", TP, 1)
    for y in range(5):
        h, g = h_field(env, f, 0.8, y)
        off = [x for x in range(5) if x not in (y, (y + 1) % 5)]
        assert np.all(h[off] == 0.0)
        assert h[y] == pytest.approx(g.sum(), abs=1e-14)
        assert compute_h_g(env, f, 0.8, (y + 1) % 5, y)[0] == pytest.approx(-g[0], abs=1e-14)
        assert case_table_residual(env, f, 0.8, y) <= 1e-14
    flat = Environment.constant(SMALL, 1.0)
    h, g = h_field(flat, observable("F1", Dirac(1.0), 1), 0.8, 0, law=Dirac(1.0))
    assert np.all(h == 0) and np.all(g == 0)


def test_case_table_in_two_dimensions():
    law = TwoPoint(2.0, 0.3)
    env = sample_environment(law, LatticeSpec(2, 4), 1)
    f = observable("F2", law, 2)
    assert case_table_residual(env, f, 0.0, 5) <= 1e-14
    assert case_table_residual(env, f, 0.5, 5) <= 1e-14


def test_h_g_refuse_continuous_scheme():
    env = sample_environment(Uniform(3.0), SMALL, 0)
    with pytest.raises(ValueError):
        compute_h_g(env, observable("F1", Uniform(3.0), 1), 1.0, 0, 0, VerticalDerivativeScheme("quadrature"))


@pytest.mark.parametrize("seed", range(5))
def test_intermediate_identity(seed):
    env = sample_environment(TP, SMALL, seed)
    f = observable("F1", TP, 1)
    for y in range(5):
        assert intermediate_identity_residual(env, f, 1.0, 1.0, y) <= 1e-8
    # at t = 0 the identity is the case table
    assert intermediate_identity_residual(env, f, 1.0, 0.0, 2) <= 1e-14


def test_intermediate_identity_dirac():
    flat = Environment.constant(SMALL)
    assert intermediate_identity_residual(flat, observable("F1", Dirac(1.0), 1), 1.0, 1.0, 0, law=Dirac(1.0)) == 0.0


# Duhamel

@pytest.mark.parametrize("seed", range(3))
def test_duhamel_formula(seed):
    env = sample_environment(TP, SMALL, seed)
    f = observable("F1", TP, 1)
    for y in range(5):
        assert duhamel_residual(env, f, 1.0, y) <= 1e-7


def test_duhamel_first_term_against_dense_oracle():
    env = sample_environment(TP, SMALL, 9)
    f = observable("F2", TP, 1)
    first, second, integral = duhamel_terms(env, f, 1.3, 1)
    # d_y P_t f(0) by brute force over the two atoms of the edge at y = 1
    vals = []
    for a in (1.0, 3.0):
        e = env.with_edges([1], [a])
        vals.append(dense_propagate(e, local_field(f, e), [1.3])[0][0])
    base = dense_propagate(env, local_field(f, env), [1.3])[0][0]
    assert first == pytest.approx(base - np.mean(vals), abs=1e-12)
    assert abs(first - second + integral) <= 1e-7


def test_duhamel_time_zero_and_far_site():
    env = sample_environment(TP, LatticeSpec(1, 9), 1)
    f = observable("F1", TP, 1)
    assert duhamel_residual(env, f, 0.0, 0) == 0.0
    first, second, integral = duhamel_terms(env, f, 0.0, 4)
    assert first == second == integral == 0.0


def test_duhamel_in_two_dimensions():
    env = sample_environment(TP, LatticeSpec(2, 3), 2)
    assert duhamel_residual(env, observable("F1", TP, 2), 0.5, 4) <= 1e-7


# key lemma and Dirichlet form

def test_key_lemma_enumerated():
    for s in [0.0, 0.5, 1.0, 3.0]:
        rep = key_lemma_check(TP, observable("F1", TP, 1), s, SMALL)
        assert rep.exact and rep.holds
        assert min(rep.margins) >= -1e-10


def test_key_lemma_dirac_and_large_time():
    rep = key_lemma_check(Dirac(1.0), observable("F1", Dirac(1.0), 1), 1.0, SMALL)
    assert rep.first_lhs == 0 and rep.second_lhs == 0 and min(rep.margins) >= 0
    late = key_lemma_check(TP, observable("F1", TP, 1), 40.0, SMALL)
    early = key_lemma_check(TP, observable("F1", TP, 1), 0.5, SMALL)
    assert late.rhs < 1e-6 * early.rhs and late.first_lhs < 1e-6 * early.first_lhs


def test_key_lemma_sampled_continuous_law():
    law = Uniform(3.0)
    rep = key_lemma_check(law, observable("F1", law, 2), 0.5, LatticeSpec(2, 6), n_env=16)
    assert not rep.exact and rep.holds


def test_dirichlet_constant_is_zero():
    rep = dirichlet_derivative(TP, constant_function(3.0, 1), 1.0, SMALL)
    assert abs(rep.value) < 1e-20 and rep.holds


def test_dirichlet_closed_form_at_zero():
    # -sum_{i=+-1} E[omega_{0,i} (f(i) - f(0))^2] with f = single centred edge: -(4 + 4)
    rep = dirichlet_derivative(TP, observable("F1", TP, 1), 0.0, SMALL)
    assert rep.exact
    assert rep.value == pytest.approx(-8.0, abs=1e-12)
    assert rep.holds


def test_dirichlet_matches_finite_difference_sampled():
    rep = dirichlet_derivative(TP, observable("F1", TP, 2), 1.0, LatticeSpec(2, 8), n_env=256)
    assert not rep.exact and rep.holds


# fixed walk scheme and iterated generators

def test_divergence_constant_is_zero():
    m = Environment.constant(LatticeSpec(2, 16))
    s = fixed_scheme_divergence_decay(m, TP, constant_function(0.0, 2), [0, 1, 2], guard_factor=None)
    assert np.all(s.values == 0.0)


@pytest.mark.parametrize("direction", [1, 2, -1])
def test_divergence_time_zero(direction):
    m = Environment.constant(LatticeSpec(2, 16))
    s = fixed_scheme_divergence_decay(m, TP, observable("F1", TP, 2), [0.0], direction=direction)
    assert s.values[0] == pytest.approx(2 * TP.variance, abs=1e-12)


def test_divergence_exact_matches_sampled():
    m = sample_environment(TP, LatticeSpec(2, 16), 0, key=(2,))
    g = observable("F1", TP, 2)
    exact = fixed_scheme_divergence_decay(m, TP, g, [0.5, 2.0], guard_factor=None)
    mc = fixed_scheme_divergence_decay(m, TP, g, [0.5, 2.0], n_env=400, mode="mc", guard_factor=None)
    assert np.all(np.abs(exact.values - mc.values) <= 3 * mc.std_errors)


def test_divergence_exponent():
    m = Environment.constant(LatticeSpec(2, 128))
    times = 2.0 ** np.arange(2, 7)
    s = fixed_scheme_divergence_decay(m, TP, observable("F1", TP, 2), times)
    assert fit_power_law(s, window=(4, 64)).exponent <= -1.7


def test_iterated_zero_is_plain_variance():
    spec = LatticeSpec(1, 32)
    g = observable("F1", TP, 1)
    a = iterated_generator_decay(TP, g, 0, spec, [0, 1, 2], n_env=6)
    b = estimate_variance_decay(TP, g, spec, [0, 1, 2], 6)
    assert np.array_equal(a.values, b.values)


def test_iterated_generator_on_random_environment_matches_observable():
    spec = LatticeSpec(1, 32)
    a = iterated_generator_decay(TP, observable("F1", TP, 1), 1, spec, [0, 1, 2], n_env=6)
    b = estimate_variance_decay(TP, observable("F3", TP, 1), spec, [0, 1, 2], 6)
    assert np.allclose(a.values, b.values, rtol=1e-13)


def test_iterated_generator_unit_scheme_exponent():
    spec = LatticeSpec(1, 256)
    times = 2.0 ** np.arange(3, 8)
    s = iterated_generator_decay(TP, observable("F1", TP, 1), 1, spec, times, scheme=Environment.constant(spec))
    assert fit_power_law(s, window=(8, 128)).exponent == pytest.approx(-2.5, abs=0.2)


def test_iterated_rejects_scheme_on_other_torus():
    with pytest.raises(ValueError):
        iterated_generator_decay(TP, observable("F1", TP, 1), 1, LatticeSpec(1, 32), [1.0],
                                 scheme=Environment.constant(LatticeSpec(1, 16)))
