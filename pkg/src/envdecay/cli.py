"""Experiment runner: ``envdecay <subcommand> [options]``.

Settings come from built-in defaults, then an optional ``key = value``
config file (section ``[run]``, then a section named after the
subcommand), then command-line flags.  Each run writes into a fresh
directory that holds the resolved configuration next to its results; files
are staged in a temporary directory and renamed into place, so a failed run
leaves nothing behind.

Exit status: 0 when every contract checked by the run holds, 1 when a
contract fails (artifacts are kept for inspection), 2 on invalid input or
a runtime error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, fields
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.special import ive

from . import __version__
from .analysis import (
    CMFunction,
    GronwallInstance,
    cm_bound_check,
    cm_signature_check,
    fit_power_law,
    gronwall_verify,
    random_admissible_instance,
    random_mixture,
)
from .kernel import gradient_l2, heat_kernel_l2, heat_kernel_l2_derivatives, weighted_gradient_l2
from .lattice import (
    OBSERVABLES,
    STREAM_MC,
    STREAM_SCHEME,
    LatticeSpec,
    observable,
    parse_law,
    replica_generator,
    sample_environment,
)
from .variance import (
    DecaySeries,
    case_table_residual,
    check_wraparound,
    dirichlet_derivative,
    duhamel_residual,
    efron_stein_check,
    estimate_variance_decay,
    fixed_scheme_divergence_decay,
    intermediate_identity_residual,
    iterated_generator_decay,
    key_lemma_check,
    wraparound_tmax,
)

SUBCOMMANDS = ("heatkernel", "variance", "identities", "gronwall", "cm", "divergence", "iterated")
MAX_EXACT_DIM = 3


@dataclass
class RunConfig:
    subcommand: str = "variance"
    dim: int = 1
    side: int = 64
    law: str = "twopoint:1,3,0.5"
    observable: str = "F1"
    tmin: float = 1.0
    tmax: float = 16.0
    per_octave: int = 1  # grid points per doubling of t
    times: str = ""  # explicit comma-separated grid; overrides tmin/tmax
    n_env: int = 64
    n_walks: int = 1000
    seed: int = 0
    workers: int = 1
    out: str = "run"
    inner: str = "exact"
    guard_factor: float = 8.0
    fit_tmin: float = 4.0
    fit_tmax: float = 0.0  # 0 means up to the wraparound limit
    walk_scheme: str = ""  # fixed walk environment law for divergence / iterated
    iterations: int = 1
    direction: int = 1
    alpha: float = 0.0  # 0 means d/4 (gronwall)
    gronwall_c: float = 0.0  # 0 means the smallest admissible constant
    series: str = ""  # gronwall: read this series.csv instead of running
    n_seeds: int = 20
    n_functionals: int = 1000
    n_instances: int = 200
    n_mixtures: int = 100
    alphas: str = "0.75,1.5,2.5"
    identity_s: float = 1.0
    identity_t: float = 1.0
    tol_duhamel: float = 1e-7
    tol_intermediate: float = 1e-8
    tol_case_table: float = 1e-14
    tol_efron_stein: float = 1e-10
    tol_key_lemma: float = 1e-10
    tol_gradient_identity: float = 1e-6
    tol_exponent: float = 0.2

    # not part of the resolved record: they change where and how fast, not what
    UNRECORDED = ("workers", "out", "subcommand")

    def to_ini(self) -> str:
        lines = [f"# envdecay {__version__}", f"[{self.subcommand}]"]
        for f in fields(self):
            if f.name not in self.UNRECORDED:
                lines.append(f"{f.name} = {getattr(self, f.name)!r}" if f.type == "float" else
                             f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


SUBCOMMAND_DEFAULTS = {
    "heatkernel": {"law": "dirac:1", "tmax": 32.0},
    "identities": {"side": 5, "guard_factor": 0.0},
    "divergence": {"dim": 2, "side": 128, "walk_scheme": "dirac:1", "tmax": 64.0},
    "iterated": {"side": 256, "walk_scheme": "dirac:1", "tmax": 128.0},
    "cm": {"n_env": 16, "tmax": 8.0},
}

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, value: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ValueError(f"{key}: expected {kind}, got {value!r}") from None
    return value.strip().strip("'\"")


def _read_config_file(path: str, subcommand: str) -> dict:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ValueError(f"cannot read config file {path}")
    out = {}
    for section in ("run", subcommand):
        if parser.has_section(section):
            for key, value in parser.items(section):
                key = key.replace("-", "_")
                if key not in _TYPES or key == "subcommand":
                    raise ValueError(f"unknown config key {key!r} in [{section}]")
                out[key] = _convert(key, value)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then command-line flags."""
    values = dict(SUBCOMMAND_DEFAULTS.get(args.subcommand, {}))
    if args.config:
        values.update(_read_config_file(args.config, args.subcommand))
    for name in _TYPES:
        given = getattr(args, name, None)
        if given is not None and name != "subcommand":
            values[name] = given
    cfg = RunConfig(subcommand=args.subcommand, **values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if not 1 <= cfg.dim <= MAX_EXACT_DIM:
        raise ValueError(f"dimension must be between 1 and {MAX_EXACT_DIM}")
    LatticeSpec(cfg.dim, cfg.side)
    parse_law(cfg.law)
    if cfg.walk_scheme and cfg.walk_scheme.lower() != "none":
        parse_law(cfg.walk_scheme)
    if cfg.observable.upper() not in OBSERVABLES:
        raise ValueError(f"unknown observable {cfg.observable!r}; choose from {', '.join(OBSERVABLES)}")
    if cfg.inner not in ("exact", "mc"):
        raise ValueError("inner must be 'exact' or 'mc'")
    for name in ("n_env", "n_walks", "workers", "n_seeds"):
        if getattr(cfg, name) < 1:
            raise ValueError(f"{name} must be >= 1")
    if cfg.inner == "mc" and cfg.n_walks < 2:
        raise ValueError("n_walks must be >= 2 with inner = mc")
    if cfg.guard_factor < 0:
        raise ValueError("guard_factor must be >= 0")
    time_grid(cfg)


def time_grid(cfg: RunConfig) -> np.ndarray:
    """Explicit ``times``, or ``0`` plus ``tmin * 2^(k / per_octave)`` up to ``tmax`` (inclusive)."""
    if cfg.times:
        try:
            ts = sorted({float(x) for x in cfg.times.split(",") if x.strip()})
        except ValueError:
            raise ValueError(f"times: cannot parse {cfg.times!r}") from None
        if not ts or ts[0] < 0:
            raise ValueError("times must be non-negative")
        return np.array(ts)
    if cfg.tmin <= 0 or cfg.tmax < cfg.tmin:
        raise ValueError("need 0 < tmin <= tmax")
    if cfg.per_octave < 1:
        raise ValueError("per_octave must be >= 1")
    ts = {0.0, float(cfg.tmax)}
    k = 0
    while (t := float(cfg.tmin) * 2.0 ** (k / cfg.per_octave)) < cfg.tmax * (1 - 1e-12):
        ts.add(t)
        k += 1
    return np.array(sorted(ts))


# ---------------------------------------------------------------------------
# helpers


def _spec(cfg):
    return LatticeSpec(cfg.dim, cfg.side)


def _guard(cfg):
    return cfg.guard_factor if cfg.guard_factor > 0 else None


def _fit_window(cfg, guard_t=None):
    hi = cfg.fit_tmax if cfg.fit_tmax > 0 else (guard_t if guard_t is not None else np.inf)
    return cfg.fit_tmin, hi


def _fit_dict(series, window, theory=None):
    try:
        fit = fit_power_law(series, window).to_dict()
    except ValueError as exc:
        return {"error": str(exc), "theory_exponent": theory}
    fit["theory_exponent"] = theory
    return fit


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _json(path, payload):
    with open(path, "w") as fh:
        json.dump(_plain(payload), fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _walk_scheme(cfg, spec):
    law = parse_law(cfg.walk_scheme or "dirac:1")
    return sample_environment(law, spec, cfg.seed, 0, key=(STREAM_SCHEME,))


def _mark(ok):
    return "PASS" if ok else "FAIL"


# ---------------------------------------------------------------------------
# subcommands; each returns (summary line, contract status or None)


def run_heatkernel(cfg: RunConfig, out: Path):
    spec = _spec(cfg)
    law = parse_law(cfg.law)
    times = time_grid(cfg)
    check_wraparound(spec, float(law.quantile(0.999)), float(times.max()), _guard(cfg))
    env = sample_environment(law, spec, cfg.seed, 0)
    hk = heat_kernel_l2(env, times)
    u, du, d2u = heat_kernel_l2_derivatives(env, times)
    grad = gradient_l2(env, times)
    wgrad = weighted_gradient_l2(env, times)
    pos = times[times > 0]
    h = 1e-3 * np.minimum(1.0, pos)
    # fourth-order central difference
    shifted = heat_kernel_l2(env, np.concatenate([pos - 2 * h, pos - h, pos + h, pos + 2 * h])).reshape(4, -1)
    fd = (shifted[0] - 8 * shifted[1] + 8 * shifted[2] - shifted[3]) / (12 * h)
    wpos = wgrad[times > 0]
    fd_rel = float(np.max(np.abs(wpos + fd) / np.abs(wpos))) if len(pos) else 0.0
    exact_rel = float(np.max(np.abs(wgrad + du) / np.maximum(np.abs(wgrad), 1e-300)))
    signature = cm_signature_check(u, du, d2u)
    zero = np.zeros_like(times)
    meta = {"law": law.spec_string(), "d": spec.d, "L": spec.L, "seed": cfg.seed}
    hk_series = DecaySeries(times, hk, zero, dict(meta, quantity="sum_y p_t(0,y)^2"))
    grad_series = DecaySeries(times, grad, zero, dict(meta, quantity="sum_{y,z} (p_t(0,y)-p_t(0,y+z))^2"))
    hk_series.to_csv(out / "series.csv")
    grad_series.to_csv(out / "gradient.csv")
    DecaySeries(times, wgrad, zero, dict(meta)).to_csv(out / "weighted_gradient.csv")
    window = _fit_window(cfg, wraparound_tmax(spec, float(law.quantile(0.999)), _guard(cfg)))
    fits = {
        "heat_kernel_l2": _fit_dict(hk_series, window, -spec.d / 2),
        "gradient_l2": _fit_dict(grad_series, window, -(spec.d / 2 + 1)),
    }
    _json(out / "fit.json", fits)
    checks = {
        "weighted_gradient_vs_finite_difference": {"max_rel_error": fd_rel, "threshold": cfg.tol_gradient_identity,
                                                   "pass": fd_rel <= cfg.tol_gradient_identity},
        "weighted_gradient_vs_exact_derivative": {"max_rel_error": exact_rel, "threshold": cfg.tol_gradient_identity,
                                                  "pass": exact_rel <= cfg.tol_gradient_identity},
        "cm_signature": signature.to_dict(),
    }
    if spec.d == 1 and law.spec_string() == "dirac:1":
        ref = ive(0, 4 * pos)
        checks["bessel_return_probability"] = {"max_rel_error": float(np.max(np.abs(hk[times > 0] - ref) / ref))}
    ok = all(c.get("pass", c.get("passed", True)) for c in checks.values())
    exps = []
    if law.atoms() is not None and len(law.atoms()[0]) == 1:
        for key, fit in fits.items():
            if "exponent" in fit:
                good = abs(fit["exponent"] - fit["theory_exponent"]) <= cfg.tol_exponent
                checks[f"{key}_exponent"] = {"pass": good, "exponent": fit["exponent"],
                                             "theory": fit["theory_exponent"], "tolerance": cfg.tol_exponent}
                ok = ok and good
    for key, fit in fits.items():
        exps.append(f"{key} {fit.get('exponent', float('nan')):.3f} (theory {fit['theory_exponent']:g})")
    _json(out / "report.json", {"checks": checks, "metadata": meta, "pass": ok})
    return f"heatkernel d={spec.d} L={spec.L} {law.spec_string()}: " + ", ".join(exps) + f" [{_mark(ok)}]", ok


def _variance_series(cfg: RunConfig, derivatives=True) -> DecaySeries:
    spec = _spec(cfg)
    law = parse_law(cfg.law)
    f = observable(cfg.observable, law, spec.d)
    return estimate_variance_decay(law, f, spec, time_grid(cfg), cfg.n_env, cfg.seed, cfg.workers, cfg.inner,
                                   cfg.n_walks, _guard(cfg), derivatives=derivatives and cfg.inner == "exact")


def _series_checks(series: DecaySeries) -> dict:
    v, se = series.values, series.std_errors
    increases = series.increases(3.0).tolist()
    checks = {"non_increasing": {"increases_beyond_3se": increases, "pass": not increases}}
    if len(v) >= 3:
        t = series.times
        # second divided difference on a possibly uneven grid
        d1 = np.diff(v) / np.diff(t)
        d2 = np.diff(d1) / ((t[2:] - t[:-2]) / 2)
        s1 = np.hypot(se[1:], se[:-1]) / np.diff(t)
        s2 = np.hypot(s1[1:], s1[:-1]) / ((t[2:] - t[:-2]) / 2)
        bad = np.flatnonzero(d2 < -3 * s2 - 1e-15 * np.abs(d1[:-1]))
        checks["convex"] = {"violations": bad.tolist(), "pass": not len(bad)}
    if series.first_derivative is not None:
        checks["cm_signature"] = cm_signature_check(
            series.values, series.first_derivative, series.second_derivative,
            series.std_errors, series.first_derivative_se, series.second_derivative_se).to_dict()
    return checks


def run_variance(cfg: RunConfig, out: Path):
    series = _variance_series(cfg)
    spec = _spec(cfg)
    series.to_csv(out / "series.csv")
    series.write_sidecar(out / "series.json")
    window = _fit_window(cfg, series.metadata.get("guard_tmax"))
    fit = _fit_dict(series, window, -spec.d / 2)
    _json(out / "fit.json", fit)
    checks = _series_checks(series)
    ok = all(c["pass"] if "pass" in c else c["passed"] for c in checks.values())
    contract = None
    if spec.d >= 3 and "exponent" in fit:
        contract = fit["exponent"] <= -spec.d / 2 + cfg.tol_exponent
        checks["exponent"] = {"exponent": fit["exponent"], "bound": -spec.d / 2 + cfg.tol_exponent, "pass": contract}
        ok = ok and contract
    _json(out / "report.json", {"checks": checks, "metadata": series.metadata, "pass": ok})
    exp = fit.get("exponent", float("nan"))
    if "error" in fit and spec.d >= 3:
        ok = False
        tail = f" [FAIL: {fit['error']}]"
    elif contract is None and ok:
        tail = " [no exponent contract for d < 3]"
    else:
        tail = f" [{_mark(ok)}]"
    return (f"variance d={spec.d} L={spec.L} {series.metadata['law']} {series.metadata['observable']} "
            f"n_env={cfg.n_env}: exponent {exp:.3f} (theory {-spec.d / 2:g}){tail}", ok)


def _multilinear(coeffs, subsets, law):
    """``sum_S c_S prod_{i in S} z_i`` in the standardised variables ``z = (x - mean) / sd``."""
    sd = np.sqrt(law.variance) if law.variance > 0 else 1.0

    def F(x):
        x = (x - law.mean) / sd
        out = np.zeros(len(x))
        for c, sub in zip(coeffs, subsets):
            out += c * np.prod(x[:, list(sub)], axis=1)
        return out

    return F


def run_identities(cfg: RunConfig, out: Path):
    spec = _spec(cfg)
    law = parse_law(cfg.law)
    f = observable(cfg.observable, law, spec.d)
    s, t = cfg.identity_s, cfg.identity_t
    rows = []

    def record(check, instance, residual, threshold, passed):
        rows.append((check, instance, float(residual), float(threshold), bool(passed)))

    exact = law.atoms() is not None
    for r in range(cfg.n_seeds):
        env = sample_environment(law, spec, cfg.seed, r)
        for y in range(spec.n_sites):
            inst = f"replica={r} y={y}"
            if exact:
                res = duhamel_residual(env, f, t, y)
                record("duhamel", inst, res, cfg.tol_duhamel, res <= cfg.tol_duhamel)
                res = intermediate_identity_residual(env, f, s, t, y)
                record("intermediate", inst, res, cfg.tol_intermediate, res <= cfg.tol_intermediate)
                for s_case in (0.0, s):
                    res = case_table_residual(env, f, s_case, y)
                    record("case_table", f"{inst} s={s_case:g}", res, cfg.tol_case_table, res <= cfg.tol_case_table)
    n_var = 8
    subsets = [c for k in range(n_var + 1) for c in combinations(range(n_var), k)]
    for k in range(cfg.n_functionals):
        coeffs = replica_generator(cfg.seed, k, STREAM_MC).standard_normal(len(subsets))
        es = efron_stein_check(_multilinear(coeffs, subsets, law), law, n_var, seed=cfg.seed + k)
        threshold = cfg.tol_efron_stein if es.exact else 3 * es.std_error
        record("efron_stein", f"functional={k}", es.slack, -threshold, es.slack >= -threshold)
    for s_key in (0.0, s):
        rep = key_lemma_check(law, f, s_key, spec, cfg.n_env, cfg.seed)
        for which, margin, se in zip(("first", "second"), rep.margins, rep.std_errors):
            threshold = cfg.tol_key_lemma if rep.exact else 3 * se
            record("key_lemma", f"{which} s={s_key:g}", margin, -threshold, margin >= -threshold)
        dr = dirichlet_derivative(law, f, s_key, spec, cfg.n_env, cfg.seed)
        record("dirichlet", f"s={s_key:g} value={dr.value!r} fd={dr.finite_difference!r}",
               abs(dr.value - dr.finite_difference), dr.tolerance, dr.holds)
    _write_rows(out / "residuals.csv", ["check", "instance", "residual", "threshold", "pass"], rows)
    summary = {}
    for check, _, res, _, passed in rows:
        entry = summary.setdefault(check, {"count": 0, "failures": 0, "worst_residual": None})
        entry["count"] += 1
        entry["failures"] += int(not passed)
        if check in ("efron_stein", "key_lemma"):
            entry["worst_residual"] = res if entry["worst_residual"] is None else min(entry["worst_residual"], res)
        else:
            entry["worst_residual"] = res if entry["worst_residual"] is None else max(entry["worst_residual"], res)
    ok = all(e["failures"] == 0 for e in summary.values())
    report = {
        "checks": summary,
        "instances": [{"check": c, "instance": i, "residual": r, "threshold": th, "pass": p} for c, i, r, th, p in rows],
        "metadata": {"law": law.spec_string(), "d": spec.d, "L": spec.L, "observable": f.name,
                     "n_seeds": cfg.n_seeds, "seed": cfg.seed, "s": s, "t": t},
        "pass": ok,
    }
    if not exact:
        report["note"] = "Duhamel, intermediate and case-table identities need a discrete law; skipped"
    _json(out / "report.json", report)
    worst = ", ".join(f"{k} {v['worst_residual']:.2e}" for k, v in summary.items())
    return f"identities d={spec.d} L={spec.L} {law.spec_string()}: {worst} [{_mark(ok)}]", ok


def run_gronwall(cfg: RunConfig, out: Path):
    spec = _spec(cfg)
    alpha = cfg.alpha if cfg.alpha > 0 else spec.d / 4
    if cfg.series:
        series = DecaySeries.from_csv(cfg.series)
    else:
        series = _variance_series(cfg, derivatives=False)
    if series.times[0] != 0:
        raise ValueError("the measured series must include t = 0")
    inst = GronwallInstance.from_samples(series.times, np.sqrt(series.values), alpha,
                                         cfg.gronwall_c if cfg.gronwall_c > 0 else None)
    measured = gronwall_verify(inst)
    rng = replica_generator(cfg.seed, 0, STREAM_MC, 1)
    reports = [gronwall_verify(random_admissible_instance(rng)) for _ in range(cfg.n_instances)]
    violations = sum(r.violation for r in reports)
    series.to_csv(out / "series.csv")
    _json(out / "fit.json", {"measured": measured.to_dict(), "alpha": alpha})
    ok = violations == 0 and measured.hypothesis_holds and measured.conclusion_holds
    _json(out / "report.json", {
        "measured": measured.to_dict(),
        "alpha": alpha,
        "random_instances": {"count": len(reports), "violations": violations,
                             "hypothesis_holds": sum(r.hypothesis_holds for r in reports),
                             "max_K": max((r.K for r in reports), default=0.0)},
        "pass": ok,
    })
    return (f"gronwall alpha={alpha:g}: measured series {measured.status} (K={measured.K:.3g}); "
            f"{violations}/{len(reports)} random violations [{_mark(ok)}]", ok)


def run_cm(cfg: RunConfig, out: Path):
    spec = _spec(cfg)
    law = parse_law(cfg.law)
    alphas = [float(a) for a in cfg.alphas.split(",") if a.strip()]
    rng = replica_generator(cfg.seed, 0, STREAM_MC, 2)
    grid = np.geomspace(1e-2, 1e3, 400)
    mixtures = {}
    for a in alphas:
        reps = [cm_bound_check(random_mixture(rng), grid, a) for _ in range(cfg.n_mixtures)]
        mixtures[repr(a)] = {"count": len(reps), "violations": sum(not r.holds for r in reps),
                             "min_margin": min(r.margin for r in reps)}
    reference = cm_bound_check(CMFunction([1.0], [1.0]), np.linspace(0.1, 50, 500), 1.0).to_dict()
    times = time_grid(cfg)
    env = sample_environment(law, spec, cfg.seed, 0)
    u, du, d2u = heat_kernel_l2_derivatives(env, times)
    hk_sig = cm_signature_check(u, du, d2u)
    DecaySeries(times, u, np.zeros_like(u)).to_csv(out / "series.csv")
    series = _variance_series(cfg)
    var_sig = _series_checks(series).get("cm_signature")
    ok = all(m["violations"] == 0 for m in mixtures.values()) and hk_sig.passed and reference["holds"]
    if var_sig is not None:
        ok = ok and var_sig["passed"]
    _json(out / "report.json", {"mixtures": mixtures, "exponential_reference": reference,
                                "heat_kernel_signature": hk_sig.to_dict(), "variance_signature": var_sig,
                                "pass": ok})
    bad = sum(m["violations"] for m in mixtures.values())
    return (f"cm: {bad} bound violations over {len(alphas)}x{cfg.n_mixtures} mixtures, "
            f"heat-kernel signature {_mark(hk_sig.passed)} [{_mark(ok)}]", ok)


def _scheme_series_report(cfg, series, theory, out, label, bound_only):
    series.to_csv(out / "series.csv")
    series.write_sidecar(out / "series.json")
    spec = _spec(cfg)
    window = _fit_window(cfg, series.metadata.get("guard_tmax"))
    fit = _fit_dict(series, window, theory)
    _json(out / "fit.json", fit)
    exp = fit.get("exponent", float("nan"))
    if bound_only:
        ok = exp <= theory + cfg.tol_exponent
    else:
        ok = abs(exp - theory) <= cfg.tol_exponent
    _json(out / "report.json", {"metadata": series.metadata, "exponent": exp, "theory": theory,
                                "tolerance": cfg.tol_exponent, "one_sided": bound_only, "pass": bool(ok)})
    return f"{label} d={spec.d} L={spec.L}: exponent {exp:.3f} (theory {theory:g}) [{_mark(ok)}]", bool(ok)


def run_divergence(cfg: RunConfig, out: Path):
    spec = _spec(cfg)
    law = parse_law(cfg.law)
    m = _walk_scheme(cfg, spec)
    g = observable(cfg.observable, law, spec.d)
    series = fixed_scheme_divergence_decay(m, law, g, time_grid(cfg), cfg.n_env, cfg.seed, cfg.direction,
                                           cfg.inner, _guard(cfg))
    series.metadata["guard_tmax"] = wraparound_tmax(spec, float(m.w.max()), _guard(cfg)) if _guard(cfg) else None
    return _scheme_series_report(cfg, series, -(spec.d / 2 + 1), out, "divergence", True)


def run_iterated(cfg: RunConfig, out: Path):
    spec = _spec(cfg)
    law = parse_law(cfg.law)
    g = observable(cfg.observable, law, spec.d)
    fixed = cfg.walk_scheme and cfg.walk_scheme.lower() != "none"
    m = _walk_scheme(cfg, spec) if fixed else None
    series = iterated_generator_decay(law, g, cfg.iterations, spec, time_grid(cfg), cfg.n_env, cfg.seed, m,
                                      cfg.inner, cfg.workers, _guard(cfg))
    if fixed and _guard(cfg):
        series.metadata["guard_tmax"] = wraparound_tmax(spec, float(m.w.max()), _guard(cfg))
    theory = -(spec.d / 2 + 2 * cfg.iterations)
    deterministic = fixed and len(set(m.w)) == 1
    return _scheme_series_report(cfg, series, theory, out, f"iterated n={cfg.iterations}", not deterministic)


RUNNERS = {
    "heatkernel": run_heatkernel,
    "variance": run_variance,
    "identities": run_identities,
    "gronwall": run_gronwall,
    "cm": run_cm,
    "divergence": run_divergence,
    "iterated": run_iterated,
}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"envdecay: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; sections [run] and [<subcommand>]")
    common.add_argument("--dim", type=int)
    common.add_argument("--side", type=int, help="torus side L")
    common.add_argument("--law", help="dirac:V | uniform:B | twopoint:1,KAPPA,P | pareto:S")
    common.add_argument("--observable", help=f"one of {', '.join(OBSERVABLES)}")
    common.add_argument("--tmin", type=float)
    common.add_argument("--tmax", type=float)
    common.add_argument("--times", help="explicit comma-separated time grid")
    common.add_argument("--per-octave", dest="per_octave", type=int, help="grid points per doubling of t")
    common.add_argument("--n-env", dest="n_env", type=int)
    common.add_argument("--n-walks", dest="n_walks", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="output directory (created; a previous run directory is replaced)")
    common.add_argument("--inner", choices=("exact", "mc"))
    common.add_argument("--guard-factor", dest="guard_factor", type=float,
                        help="wraparound guard multiplier (0 disables)")
    common.add_argument("--fit-tmin", dest="fit_tmin", type=float)
    common.add_argument("--fit-tmax", dest="fit_tmax", type=float)
    common.add_argument("--walk-scheme", dest="walk_scheme", help="law of the fixed walk environment, or 'none'")
    common.add_argument("--iterations", type=int, help="n in L^n g")
    common.add_argument("--direction", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--gronwall-c", dest="gronwall_c", type=float)
    common.add_argument("--series", help="series.csv to verify instead of running")
    common.add_argument("--n-seeds", dest="n_seeds", type=int)
    common.add_argument("--n-functionals", dest="n_functionals", type=int)
    common.add_argument("--n-instances", dest="n_instances", type=int)
    common.add_argument("--n-mixtures", dest="n_mixtures", type=int)
    common.add_argument("--alphas")
    common.add_argument("--identity-s", dest="identity_s", type=float)
    common.add_argument("--identity-t", dest="identity_t", type=float)
    for name in ("duhamel", "intermediate", "case_table", "efron_stein", "key_lemma", "gradient_identity",
                 "exponent"):
        common.add_argument(f"--tol-{name.replace('_', '-')}", dest=f"tol_{name}", type=float)
    parser = _Parser(prog="envdecay", description="Random conductance model decay experiments.")
    parser.add_argument("--version", action="version", version=f"envdecay {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _prepare_target(out: Path) -> None:
    if out.exists():
        if not out.is_dir():
            raise ValueError(f"{out} exists and is not a directory")
        if any(out.iterdir()) and not (out / "config.resolved").exists():
            raise ValueError(f"{out} is a non-empty directory that is not a previous run; refusing to replace it")


def run(cfg: RunConfig) -> tuple[str, bool]:
    """Execute one run and move its artifacts into ``cfg.out``."""
    out = Path(cfg.out)
    _prepare_target(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        (staging / "config.resolved").write_text(cfg.to_ini())
        summary, ok = RUNNERS[cfg.subcommand](cfg, staging)
        if out.exists():
            shutil.rmtree(out)
        os.replace(staging, out)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return summary, ok


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        summary, ok = run(cfg)
    except (ValueError, RuntimeError, OSError, KeyError, configparser.Error) as exc:
        print(f"envdecay: error: {exc}", file=sys.stderr)
        return 2
    print(summary)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
