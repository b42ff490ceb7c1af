import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diracqc.errors import DimensionError, EvaluationError
from diracqc.phase import (PhasePoint, PhysicalConstants, ScalarPhaseFunction, fd_gradient, poisson_bracket,
                           random_polynomial, symplectic_matrix)


def point(R, P, m=None):
    R = np.atleast_1d(np.asarray(R, float))
    return PhasePoint(R, P, np.ones_like(R) if m is None else m)


def test_symplectic_n1():
    assert np.array_equal(symplectic_matrix(1), [[0.0, 1.0], [-1.0, 0.0]])


@given(st.integers(1, 12))
def test_symplectic_identities(N):
    B = symplectic_matrix(N)
    assert np.array_equal(B + B.T, np.zeros_like(B))
    assert np.array_equal(B @ B, -np.eye(2 * N))


@pytest.mark.parametrize("N", [0, -1, 1.5])
def test_symplectic_rejects_bad_size(N):
    with pytest.raises(DimensionError):
        symplectic_matrix(N)


def test_phase_point_validation():
    with pytest.raises(DimensionError):
        PhasePoint([0.0, 1.0], [0.0], [1.0, 1.0])
    with pytest.raises(DimensionError):
        PhasePoint([0.0], [0.0], [0.0])
    X = point([1.0, 2.0], [3.0, 4.0], [1.0, 2.0])
    assert X.kinetic_energy == pytest.approx(0.5 * (9 + 8))
    with pytest.raises(ValueError):
        X.R[0] = 5.0


def test_physical_constants_positive():
    with pytest.raises(ValueError):
        PhysicalConstants(hbar=0.0)


def test_canonical_pair():
    X = point([0.3, -1.2], [0.7, 2.0])
    for k in range(2):
        assert poisson_bracket(ScalarPhaseFunction.position(k), ScalarPhaseFunction.momentum(k), X) == 1.0


def test_bracket_with_itself_vanishes():
    f = random_polynomial(np.random.default_rng(3), 4)
    assert poisson_bracket(f, f, point([0.1, 0.2], [0.3, 0.4])) == pytest.approx(0.0, abs=1e-14)


def test_chain_rule_value():
    r2 = ScalarPhaseFunction(lambda X: X.R[0] ** 2)   # no analytic gradient: FD path
    assert poisson_bracket(r2, ScalarPhaseFunction.momentum(0), point([3.0], [0.0])) == pytest.approx(6.0, abs=1e-7)


def test_fd_gradient_constant_and_quadratic():
    X = point([1.0], [2.0])
    assert np.array_equal(fd_gradient(lambda X: 4.0, X), [0.0, 0.0])
    g = fd_gradient(lambda X: 0.5 * X.P[0] ** 2, X, h=1e-4)
    assert g[1] == pytest.approx(2.0, abs=1e-7)


def test_fd_gradient_nonfinite_names_index():
    with pytest.raises(EvaluationError) as exc:
        fd_gradient(lambda X: np.nan if X.P[0] > 0 else 0.0, point([0.0], [0.0]))
    assert exc.value.index == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_polynomial_gradient_matches_fd(seed, N):
    rng = np.random.default_rng(seed)
    f = random_polynomial(rng, 2 * N, scale=0.5)
    X = PhasePoint(rng.uniform(-1, 1, N), rng.uniform(-1, 1, N), np.ones(N))
    assert np.allclose(f.gradient(X), fd_gradient(f, X), atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bracket_antisymmetric_and_leibniz(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_polynomial(rng, 4, scale=0.5) for _ in range(3))
    X = PhasePoint(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2), [1.0, 2.0])
    assert poisson_bracket(a, b, X) == pytest.approx(-poisson_bracket(b, a, X), abs=1e-12)
    lhs = poisson_bracket(a * b, c, X)
    rhs = a(X) * poisson_bracket(b, c, X) + b(X) * poisson_bracket(a, c, X)
    assert lhs == pytest.approx(rhs, abs=1e-10)
