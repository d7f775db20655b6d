from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from envdecay.analysis import (
    CMFunction,
    GronwallInstance,
    _convolution,
    cm_bound_check,
    cm_bound_constant,
    cm_signature_check,
    fit_power_law,
    gronwall_verify,
    random_admissible_instance,
    random_mixture,
)
from envdecay.variance import DecaySeries


def power_instance(alpha, exponent, grid=None, C=None):
    grid = np.concatenate([[0.0], np.geomspace(1e-2, 1e3, 80)]) if grid is None else grid
    return GronwallInstance(grid, lambda t: (t + 1.0) ** -exponent,
                            lambda t: -exponent * (t + 1.0) ** (-exponent - 1), alpha, C)


# power-law fits

def test_pure_power_law_is_exact():
    t = np.geomspace(1, 1000, 12)
    fit = fit_power_law(t, values=5 * t**-1.5, window=(1, 1000))
    assert fit.exponent == pytest.approx(-1.5, abs=1e-12)
    assert fit.amplitude == pytest.approx(5.0, rel=1e-12)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(fit.residuals, 0, atol=1e-12)


def test_constant_series():
    t = np.geomspace(4, 64, 5)
    fit = fit_power_law(t, values=np.full(5, 3.0))
    assert fit.exponent == pytest.approx(0.0, abs=1e-12) and fit.r_squared == 1.0


def test_corrected_power_law():
    t = 2.0 ** np.arange(3, 8)
    fit = fit_power_law(t, values=t**-2 * (1 + 1 / t), window=(8, 128))
    assert -2.2 < fit.exponent < -1.9


@given(beta=st.floats(-4, 1), amp=st.floats(1e-3, 1e3), c=st.floats(0.01, 100))
def test_time_rescaling_invariance(beta, amp, c):
    t = np.geomspace(4, 256, 7)
    a = fit_power_law(t, values=amp * t**beta)
    b = fit_power_law(c * t, values=amp * t**beta, window=(0, np.inf))
    assert b.exponent == pytest.approx(a.exponent, abs=1e-12)
    assert b.amplitude == pytest.approx(amp * c ** (-beta), rel=1e-9)


def test_weighted_fit_uses_errors():
    t = np.geomspace(4, 64, 5)
    v = t**-1.0
    v_bad = v.copy()
    v_bad[-1] *= 3
    se = np.full(5, 1e-4) * v
    se[-1] = 10 * v_bad[-1]
    fit = fit_power_law(t, values=v_bad, std_errors=se)
    assert fit.weighted and fit.exponent == pytest.approx(-1.0, abs=1e-3)


def test_default_window_honours_guard():
    t = np.array([0, 1, 2, 4, 8, 16, 32, 64, 128.0])
    s = DecaySeries(t, (t + 1) ** -1.0, np.zeros_like(t), {"guard_tmax": 64.0})
    fit = fit_power_law(s)
    assert (fit.t_min, fit.t_max) == (4.0, 64.0)


def test_fit_errors():
    t = np.array([4, 8, 16, 32.0])
    with pytest.raises(ValueError):
        fit_power_law(t, values=np.array([1, 0.5, 0, 0.1]))
    with pytest.raises(ValueError):
        fit_power_law(t[:3], values=np.ones(3))


# Gronwall lemma

def test_convolution_matches_adaptive_quadrature():
    inst = power_instance(1.3, 1.0, grid=np.array([0.0, 0.5, 3.0, 40.0, 500.0]))
    conv = _convolution(inst, 4096)
    for t, c in zip(inst.grid, conv):
        ref = quad(lambda s: (t - s + 1) ** -1.3 * float(inst.b(s)), 0, t, limit=400)[0]
        assert c == pytest.approx(ref, abs=1e-7)


def test_self_consistent_power():
    rep = gronwall_verify(power_instance(1.0, 1.0))
    assert rep.hypothesis_holds and rep.conclusion_holds
    assert rep.C <= 2 and rep.K <= 2
    assert rep.status == "conclusion holds" and not rep.violation


def test_slower_decay_fails_hypothesis_not_conclusion():
    C = gronwall_verify(power_instance(1.0, 1.0)).C
    rep = gronwall_verify(power_instance(1.0, 0.5, C=C))
    assert not rep.hypothesis_holds and rep.hypothesis_margin < 0
    assert rep.status == "hypothesis fails" and not rep.violation


def test_instance_validation():
    grid = np.array([0.0, 1.0, 2.0])
    with pytest.raises(ValueError):
        GronwallInstance(grid, lambda t: 1 + t, lambda t: np.ones_like(t), 1.0)
    with pytest.raises(ValueError):
        GronwallInstance(grid, lambda t: 1 / (1 + t), lambda t: -1 / (1 + t) ** 2, 0.5)
    with pytest.raises(ValueError):
        GronwallInstance.from_samples([0, 1, 2], [1.0, 2.0, 0.5], 1.0)


def test_from_samples_is_monotone_and_b_nonnegative():
    t = np.array([0, 1, 4, 16, 64.0])
    inst = GronwallInstance.from_samples(t, (t + 1) ** -0.75, 0.75)
    fine = np.linspace(0, 64, 2001)
    assert np.all(np.diff(inst.a(fine)) <= 1e-15)
    assert np.all(inst.b(fine) >= 0)
    assert np.allclose(inst.a(t), (t + 1) ** -0.75)


@pytest.mark.parametrize("seed", range(25))
def test_random_admissible_instances(seed):
    inst = random_admissible_instance(np.random.default_rng(seed))
    assert 0.6 < inst.alpha < 3
    rep = gronwall_verify(inst)
    assert rep.integral_error <= 1e-6
    assert not rep.violation


# completely monotone functions

def test_mixture_signs():
    rng = np.random.default_rng(0)
    t = np.geomspace(1e-2, 1e2, 50)
    for _ in range(20):
        assert random_mixture(rng).sign_violations(t) == 0


def test_power_mixture_approximates_power():
    f = CMFunction.power(1.0)
    t = np.geomspace(0.1, 50, 30)
    assert np.allclose(f(t), 1 / (1 + t), rtol=1e-8)
    assert cm_bound_check(f, t, 1.0).holds


def test_exponential_closed_form():
    f = CMFunction([1.0], [1.0])
    grid = np.linspace(0.1, 50, 4991)  # contains t = 1
    rep = cm_bound_check(f, grid, 1.0)
    assert rep.C == pytest.approx(np.exp(-1), rel=1e-6)
    assert cm_bound_constant(1.0) == pytest.approx(2 * np.e)
    # C e Gamma(3) = 2 with C = 1/e
    assert np.all(np.exp(-grid) <= 2 / grid**2 + 1e-12)
    assert rep.holds


def test_constant_atom_fails_hypothesis():
    rep = cm_bound_check(CMFunction([1.0, 0.5], [0.0, 2.0]), np.geomspace(0.1, 10, 5), 0.5)
    assert rep.status == "hypothesis fails" and not rep.hypothesis_holds
    with pytest.raises(ValueError):
        cm_bound_check(CMFunction([1.0], [1.0]), [1.0], 0.0)
    with pytest.raises(ValueError):
        CMFunction([], [])
    with pytest.raises(ValueError):
        CMFunction([-1.0], [1.0])


@given(seed=st.integers(0, 2**32 - 1), alpha=st.sampled_from([0.75, 1.5, 2.5]))
def test_bound_holds_on_random_mixtures(seed, alpha):
    f = random_mixture(np.random.default_rng(seed))
    assert cm_bound_check(f, np.geomspace(1e-2, 1e3, 400), alpha).holds


def test_signature_check():
    t = np.linspace(0, 5, 11)
    f = CMFunction([1.0, 2.0], [0.5, 3.0])
    assert cm_signature_check(f(t), f.derivative(t, 1), f.derivative(t, 2)).passed
    const = np.full(5, 2.0)
    assert cm_signature_check(const, np.zeros(5), np.zeros(5)).passed
    bad = cm_signature_check(const, np.full(5, 0.1), np.zeros(5))
    assert not bad.passed and bad.first_violations == 5
    # a violation inside the error bars is tolerated
    assert cm_signature_check(const, np.full(5, 0.1), np.zeros(5), du_se=np.full(5, 0.05)).passed
