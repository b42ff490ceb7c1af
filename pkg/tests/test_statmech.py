import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import manifold_points
from diracqc.constraints import constraint_gallery, parabola_bead, unconstrained
from diracqc.dirac import DiracEngine
from diracqc.errors import ConfigError
from diracqc.phase import PhasePoint
from diracqc.quantum import adiabatic_forces, adiabatize, model_gallery
from diracqc.rng import CounterRNG
from diracqc.statmech import (DensityExpansion, StationaryDensity, fredholm_check, fredholm_integrand,
                              fredholm_integrand_batch, j_action, parity_defect, recursion_residual,
                              residual_scan, rho0, rho1, rho1_bracket, sample_stationary)


def exact_bracket(beta, dE):
    b, e = mpmath.mpf(beta), mpmath.mpf(dE)
    with mpmath.workdps(60):
        return float((1 - mpmath.exp(-b * e)) / (-e) + b / 2 * (1 + mpmath.exp(-b * e)))


@pytest.mark.parametrize("beta", [0.5, 1.0, 3.0])
@pytest.mark.parametrize("dE", [1e-9, -3e-6, 2.9e-4, 9.9e-4, 1.01e-3, -0.02, 0.7, -4.0])
def test_bracket_against_high_precision(beta, dE):
    exact = exact_bracket(beta, dE)
    assert rho1_bracket(beta, dE) == pytest.approx(exact, rel=1e-9, abs=1e-300)


def test_bracket_vanishes_at_degeneracy():
    assert rho1_bracket(1.0, 0.0) == 0.0
    assert abs(rho1_bracket(2.0, 1e-8)) < 1e-15


@settings(max_examples=50)
@given(st.floats(0.1, 5), st.floats(-3, 3))
def test_bracket_detailed_balance(beta, dE):
    # b(-dE) = exp(beta dE) b(dE)
    x = beta * dE
    lhs = rho1_bracket(beta, -dE)
    rhs = np.exp(x) * rho1_bracket(beta, dE)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-14)


def test_density_parameter_validation():
    with pytest.raises(ConfigError):
        StationaryDensity(beta=0.0)
    with pytest.raises(ConfigError):
        StationaryDensity(mode="microcanonical-delta")
    with pytest.raises(ConfigError):
        StationaryDensity(mode="grand")


def test_rho0_examples(dimer):
    model = model_gallery("two-level-linear", 4)
    sd = StationaryDensity(beta=1.3, Q=2.0)
    X1, X2 = manifold_points(dimer, 2, seed=1)
    eng = DiracEngine(dimer)
    f1, f2 = adiabatize(model, X1.R), adiabatize(model, X2.R)
    assert rho0(sd, X1, 0, f1, eng, 1) == 0.0
    H1 = X1.kinetic_energy + f1.E[0]
    H2 = X2.kinetic_energy + f2.E[0]
    assert rho0(sd, X1, 0, f1, eng) / rho0(sd, X2, 0, f2, eng) == pytest.approx(np.exp(-1.3 * (H1 - H2)), rel=1e-8)

    free = unconstrained([1.0, 1.0])
    X = PhasePoint([0.2, -0.3], [0.4, 0.1], [1.0, 1.0])
    m2 = model_gallery("two-level-linear", 2)
    fr = adiabatize(m2, X.R)
    H = X.kinetic_energy + fr.E[1]
    assert rho0(sd, X, 1, fr, DiracEngine(free)) == pytest.approx(np.exp(-1.3 * H) / 2.0, rel=1e-14)


def test_rho1_trivial_cases():
    m = model_gallery("two-level-linear", 2)
    sd = StationaryDensity()
    X = PhasePoint([0.2, -0.3], [0.4, 0.1], [1.0, 1.0])
    fr = adiabatize(m, X.R)
    assert rho1(sd, X, 1, 1, fr) == 0
    assert rho1(sd, X.replace(P=[0.0, 0.0]), 0, 1, fr) == 0
    assert rho1(sd, X, 0, 1, fr).real == 0.0


def test_expansion_matches_pointwise_rho1():
    m = model_gallery("two-level-linear", 2)
    cs = unconstrained([1.0, 2.0])
    sd = StationaryDensity(beta=0.8)
    exp = DensityExpansion(sd, m, cs)
    X = PhasePoint([0.2, -0.3], [0.4, 0.1], [1.0, 2.0])
    fr = adiabatize(m, X.R)
    full = exp.full(X.R, X.P, 1, fr.U)
    assert full[0, 1] == pytest.approx(rho1(sd, X, 0, 1, fr), rel=1e-12)


def test_order_zero_residual_vanishes(dimer):
    exp = DensityExpansion(StationaryDensity(), model_gallery("two-level-linear", 4), dimer)
    for X in manifold_points(dimer, 5, seed=2):
        assert np.array_equal(recursion_residual(exp, X, 0), np.zeros((2, 2)))


def test_unconstrained_order_one_residual():
    cs = unconstrained([1.0, 2.0])
    exp = DensityExpansion(StationaryDensity(beta=1.0), model_gallery("two-level-linear", 2, coupling=0.6), cs)
    rng = np.random.default_rng(3)
    pts = [PhasePoint(rng.normal(size=2) * 0.7, rng.normal(size=2), cs.masses) for _ in range(15)]
    scan = residual_scan(exp, pts, 1)
    assert scan.n_excluded == 0
    assert scan.max_residual < 1e-6


def test_constrained_diagonal_residual(dimer):
    # a wider softened delta keeps central differences through the Gaussians accurate
    exp = DensityExpansion(StationaryDensity(beta=1.0, xi_width=0.05), model_gallery("two-level-linear", 4), dimer)
    for X in manifold_points(dimer, 3, seed=4):
        r = recursion_residual(exp, X, 1)
        scale = np.max(np.abs(exp.full(X.R, X.P, 0)))
        assert np.max(np.abs(np.diag(r))) < 1e-6 * scale


def test_zero_density_zero_action():
    rng = np.random.default_rng(5)
    d = rng.normal(size=(2, 2, 3))
    out = j_action(np.zeros((2, 2)), np.zeros((3, 2, 2)), rng.normal(size=3), d, np.array([-1.0, 1.0]), d)
    assert np.array_equal(out, np.zeros((2, 2)))


@pytest.fixture(scope="module")
def dimer_samples():
    cs = constraint_gallery("dimer-bond")
    m = model_gallery("two-level-linear", 4, coupling=0.5, delta=0.5)
    sd = StationaryDensity(beta=1.0)
    return cs, m, sd, sample_stationary(sd, cs, m, 4000, CounterRNG(1), chains=32)


def test_samples_on_manifold(dimer_samples):
    cs, _, _, s = dimer_samples
    assert np.max(np.abs(cs.sigma(s.R))) <= 1e-10
    assert np.max(np.abs(cs.sigma_dot(s.R, s.P))) <= 1e-12
    bond = np.linalg.norm(s.R[:, :2] - s.R[:, 2:], axis=1)
    assert np.allclose(bond, 1.0, atol=1e-10)
    assert 0.1 < s.acceptance < 0.95


def test_equipartition(dimer_samples):
    cs, _, sd, s = dimer_samples
    m, se = s.mean_se(np.sum(s.P**2 / cs.masses, axis=1))
    assert abs(m - 3.0 / sd.beta) < 3 * se


def test_sampler_is_deterministic():
    cs = constraint_gallery("dimer-bond")
    m = model_gallery("two-level-linear", 4)
    sd = StationaryDensity()
    a = sample_stationary(sd, cs, m, 100, 7, chains=8, burn_in=10)
    b = sample_stationary(sd, cs, m, 100, CounterRNG(7), chains=8, burn_in=10)
    c = sample_stationary(sd, cs, m, 100, 8, chains=8, burn_in=10)
    assert np.array_equal(a.R, b.R) and np.array_equal(a.P, b.P) and np.array_equal(a.alpha, b.alpha)
    assert not np.array_equal(a.R, c.R)


def test_parabola_position_marginal():
    """x-density on y = x^2 is proportional to sqrt(det Z) sum_a exp(-beta E_a)."""
    cs = parabola_bead(1.0, masses=(1.0, 3.0))
    m = model_gallery("two-level-linear", 2, coupling=0.5, delta=0.5)
    s = sample_stationary(StationaryDensity(), cs, m, 8000, 3, chains=64, thin=10, step=0.8)
    xs = np.linspace(-6, 6, 100001)
    R = np.stack([xs, xs**2], 1)
    E, _, _ = adiabatic_forces(m, R)
    dens = np.sqrt(np.linalg.det(cs.z_matrix(R))) * np.exp(-E).sum(1)
    cdf = np.concatenate([[0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(xs))])
    cdf /= cdf[-1]
    edges = np.concatenate([[-6], np.linspace(-2, 2, 13), [6]])
    expected = np.diff(np.interp(edges, xs, cdf)) * len(s)
    observed = np.histogram(s.R[:, 0], edges)[0]
    assert stats.chisquare(observed, expected * observed.sum() / expected.sum()).pvalue > 1e-3


def test_sampler_rejects_bad_requests(dimer):
    m = model_gallery("two-level-linear", 4)
    with pytest.raises(ConfigError):
        sample_stationary(StationaryDensity(mode="microcanonical-delta", energy_shell=1.0), dimer, m, 10, 0)
    with pytest.raises(ConfigError):
        sample_stationary(StationaryDensity(), dimer, m, 0, 0)


def test_fredholm_batch_matches_pointwise(dimer_samples):
    cs, m, sd, s = dimer_samples
    exp = DensityExpansion(sd, m, cs)
    for order in (1, "s"):
        batch = fredholm_integrand_batch(exp, s.R[:6], s.P[:6], s.alpha[:6], order)
        point = [fredholm_integrand(exp, s.R[k], s.P[k], int(s.alpha[k]), order) for k in range(6)]
        assert np.allclose(batch, point, atol=1e-7, rtol=1e-6)


def test_fredholm_integrand_is_odd(dimer_samples):
    cs, m, sd, s = dimer_samples
    exp = DensityExpansion(sd, m, cs)
    for k in range(5):
        scale = abs(fredholm_integrand(exp, s.R[k], s.P[k], int(s.alpha[k]), "s"))
        assert parity_defect(exp, s.R[k], s.P[k], int(s.alpha[k])) <= 1e-6 * max(1.0, scale)


def test_fredholm_estimates(dimer_samples):
    cs, m, sd, s = dimer_samples
    exp = DensityExpansion(sd, m, cs)
    est = fredholm_check(exp, s, "s")
    assert [e.name for e in est] == ["1", "H", "H^2"]
    assert all(e.stderr > 0 and e.z_score < 3 for e in est)
    zero = fredholm_check(exp, s, "s", {"0": lambda H: 0.0 * H})[0]
    assert zero.estimate == 0.0 and zero.z_score == 0.0
