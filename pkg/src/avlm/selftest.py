"""Built-in oracle suite for the directional primitives.

Quick, dependency-free checks runnable in the field via ``avlm selftest``:
closed-form spot values, the exact Bessel derivative lemma, the bound
sandwich, quadrature normalization, and sampler statistics.  Each check
prints one PASS/FAIL line; the suite exits nonzero on any failure.
"""

from __future__ import annotations

import math

import numpy as np

from .directional import (
    PsParams,
    VmfParams,
    bessel_i_series,
    bessel_ratio_bounds,
    digamma,
    log_gamma,
    ps_log_normalizer,
    sample_vmf,
    sphere_log_surface_area,
    vmf_log_normalizer_approx,
    vmf_log_normalizer_deriv,
)


def _exact_vmf_log_normalizer(d: int, kappa: float) -> float:
    # (d/2-1) ln k - (d/2) ln 2pi - ln I_{d/2-1}(k); series oracle, z <= 60
    return ((d / 2 - 1) * math.log(kappa) - (d / 2) * math.log(2 * math.pi)
            - math.log(bessel_i_series(d / 2 - 1, kappa)))


def _check_special_values() -> str | None:
    cases = [
        (log_gamma(1.0), 0.0),
        (log_gamma(0.5), 0.5 * math.log(math.pi)),
        (log_gamma(5.0), math.log(24.0)),
        (sphere_log_surface_area(2), math.log(2 * math.pi)),
        (sphere_log_surface_area(3), math.log(4 * math.pi)),
        (sphere_log_surface_area(4), math.log(2 * math.pi ** 2)),
        (bessel_i_series(0, 0.0), 1.0),
        (bessel_i_series(0.5, 1.0), math.sqrt(2 / math.pi) * math.sinh(1.0)),
    ]
    for got, want in cases:
        if abs(got - want) > 1e-12 * max(1.0, abs(want)):
            return f"got {got!r}, expected {want!r}"
    return None


def _check_digamma() -> str | None:
    for x in (0.3, 1.0, 2.5, 7.0, 42.0, 1e4):
        h = 1e-6 * max(1.0, x)
        fd = (log_gamma(x + h) - log_gamma(x - h)) / (2 * h)
        if abs(digamma(x) - fd) > 1e-6 * max(1.0, abs(fd)):
            return f"digamma({x}) = {digamma(x)!r} vs finite difference {fd!r}"
    return None


def _check_monotone_normalizer() -> str | None:
    for d in (3, 5, 11, 64):
        grid = np.concatenate([[0.0], np.geomspace(1e-3, 1e4, 60)])
        vals = vmf_log_normalizer_approx(d, grid)
        if not np.all(np.diff(vals) < 0):
            return f"F_{d} not strictly decreasing"
    return None


def _check_exact_derivative_lemma() -> str | None:
    # d/dkappa ln C_d = -I_{d/2}/I_{d/2-1} exactly
    for d in (3, 5, 8):
        for k in (0.5, 2.0, 10.0, 40.0):
            h = 1e-5 * k
            fd = (_exact_vmf_log_normalizer(d, k + h) - _exact_vmf_log_normalizer(d, k - h)) / (2 * h)
            ratio = bessel_i_series(d / 2, k) / bessel_i_series(d / 2 - 1, k)
            if abs(fd + ratio) > 1e-6 * ratio:
                return f"d={d}, kappa={k}: FD {fd!r} vs -ratio {-ratio!r}"
    return None


def _check_bound_sandwich() -> str | None:
    for d in (3, 5, 11):
        for k in (0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0):
            lo, hi = bessel_ratio_bounds(d / 2, k)
            ratio = bessel_i_series(d / 2, k) / bessel_i_series(d / 2 - 1, k)
            if not (lo < ratio < hi):
                return f"d={d}, kappa={k}: ratio {ratio!r} outside ({lo!r}, {hi!r})"
    return None


def _check_approx_derivative_consistency() -> str | None:
    # the analytic gradient used in training equals the derivative of F_d
    for d in (3, 16, 128):
        for k in (0.5, 3.0, 30.0, 300.0):
            h = 1e-5 * k
            fd = (vmf_log_normalizer_approx(d, k + h) - vmf_log_normalizer_approx(d, k - h)) / (2 * h)
            an = vmf_log_normalizer_deriv(d, k)
            if abs(fd - an) > 1e-6 * abs(an):
                return f"d={d}, kappa={k}: FD {fd!r} vs analytic {an!r}"
    return None


def _check_vmf_offset_envelope() -> str | None:
    # F_3 - ln C_3 drifts with kappa; the measured envelope at d=3 is ~0.11
    ks = (0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0)
    offs = [vmf_log_normalizer_approx(3, k) - math.log(k / (4 * math.pi * math.sinh(k))) for k in ks]
    drift = max(offs) - min(offs)
    if drift > 0.12:
        return f"offset drift {drift!r} exceeds the expected 0.12 envelope"
    return None


def _check_ps_normalization() -> str | None:
    x, w = np.polynomial.legendre.leggauss(200)
    theta = (x + 1) * (math.pi / 2)
    for k in (0.0, 1.0, 5.0, 20.0):
        closed = math.log((k + 1) / (2 ** (k + 1) * 2 * math.pi))
        if abs(ps_log_normalizer(3, k) - closed) > 1e-10:
            return f"kappa={k}: normalizer {ps_log_normalizer(3, k)!r} vs closed form {closed!r}"
        dens = np.exp(k * np.log1p(np.cos(theta)) + ps_log_normalizer(3, k))
        integral = float(np.sum(w * dens * 2 * math.pi * np.sin(theta)) * math.pi / 2)
        if abs(integral - 1.0) > 1e-6:
            return f"kappa={k}: density integrates to {integral!r}"
    return None


def _check_sampler() -> str | None:
    mu = np.zeros(8)
    mu[0] = 1.0
    params = VmfParams(mu, 50.0)
    a = sample_vmf(params, np.random.default_rng(123), size=5)
    b = sample_vmf(params, np.random.default_rng(123), size=5)
    if not np.array_equal(a, b):
        return "sampler is not deterministic for a fixed seed"
    x = sample_vmf(params, np.random.default_rng(0), size=20000)
    mean = x.mean(axis=0)
    if mean @ mu / np.linalg.norm(mean) < 0.98:
        return "concentrated sample mean direction strays from mu"
    ratio = bessel_i_series(4, 50.0) / bessel_i_series(3, 50.0)
    if abs((x @ mu).mean() - ratio) > 0.01:
        return f"mean cosine {(x @ mu).mean()!r} vs Bessel-ratio expectation {ratio!r}"
    u = sample_vmf(VmfParams(np.array([0.0, 0.0, 1.0]), 0.0), np.random.default_rng(1), size=20000)
    if np.linalg.norm(u.mean(axis=0)) > 0.02:
        return "uniform (kappa=0) sample mean is not near zero"
    return None


CHECKS = [
    ("special-function spot values", _check_special_values),
    ("digamma vs log-gamma finite differences", _check_digamma),
    ("vmf log-normalizer strictly decreasing", _check_monotone_normalizer),
    ("exact Bessel derivative lemma (series oracle)", _check_exact_derivative_lemma),
    ("Bessel-ratio bound sandwich", _check_bound_sandwich),
    ("analytic normalizer gradient matches finite differences", _check_approx_derivative_consistency),
    ("vmf normalizer offset envelope at d=3", _check_vmf_offset_envelope),
    ("power spherical normalization (quadrature + closed form)", _check_ps_normalization),
    ("vmf sampler determinism and statistics", _check_sampler),
]


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, check in CHECKS:
        detail = check()
        if detail is None:
            if verbose:
                print(f"PASS  {name}")
        else:
            ok = False
            if verbose:
                print(f"FAIL  {name}: {detail}")
    return ok
