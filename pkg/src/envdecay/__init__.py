"""Decay of the environment seen from a random walk among random conductances.

Torus environments, exact semigroups by uniformization, an event-driven
walker, the variance identities behind the decay rate, and fitting and
verification tools for the resulting series.
"""
from __future__ import annotations

from importlib.metadata import PackageNotFoundError, version

from .analysis import (
    CMFunction,
    GronwallInstance,
    PowerLawFit,
    cm_bound_check,
    cm_signature_check,
    fit_power_law,
    gronwall_verify,
)
from .kernel import (
    ProbVector,
    UniformizationParams,
    apply_generator,
    gradient_l2,
    heat_kernel_l2,
    heat_kernel_l2_derivatives,
    propagate,
    return_probability,
    semigroup,
    weighted_gradient_l2,
)
from .lattice import (
    Dirac,
    Environment,
    LatticeSpec,
    LocalFunction,
    Pareto,
    TwoPoint,
    Uniform,
    eval_local,
    observable,
    parse_law,
    sample_environment,
)
from .variance import (
    DecaySeries,
    VerticalDerivativeScheme,
    efron_stein_check,
    estimate_variance_decay,
    exact_ft,
    fixed_scheme_divergence_decay,
    iterated_generator_decay,
)
from .walker import mc_ft, simulate_endpoint

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
