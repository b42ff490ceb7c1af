import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import manifold_points
from diracqc.constraints import (ConstraintSet, HolonomicConstraint, c_matrix_and_inverse, constraint_blocks,
                                 constraint_force, constraint_gallery, fd_hessian, lagrange_multipliers,
                                 plane_constraint, project_momenta, project_positions, sigma_dot,
                                 tangent_projector)
from diracqc.dirac import DiracEngine
from diracqc.errors import DegenerateConstraintError, DimensionError
from diracqc.phase import PhasePoint, poisson_bracket

X_DIMER = PhasePoint([0.5, 0.0, -0.5, 0.0], [0.0, 0.5, 0.0, -0.5], np.ones(4))


def test_sigma_dot_examples(dimer):
    bond = dimer.constraints[0]
    assert sigma_dot(bond, X_DIMER.replace(P=np.zeros(4))) == 0.0
    assert sigma_dot(bond, X_DIMER.replace(P=[0.3, -0.2, 0.3, -0.2])) == 0.0
    lin = HolonomicConstraint(lambda R: R[..., 0], lambda R: np.array([1.0]))
    assert sigma_dot(lin, PhasePoint([0.0], [2.0], [4.0])) == 0.5


def test_dimer_blocks(dimer):
    Z, G = constraint_blocks(dimer, X_DIMER)
    assert Z.tolist() == [[2.0]]
    assert G.tolist() == [[0.0]]


def test_blocks_antisymmetry_and_inverse(cset):
    for X in manifold_points(cset, 10, seed=1):
        Z, G = constraint_blocks(cset, X)
        assert np.allclose(G, -G.T, atol=1e-14)
        assert np.allclose(Z, Z.T)
        C, Ci = c_matrix_and_inverse(cset, X)
        l = cset.l
        assert np.array_equal(C[:l, :l], np.zeros((l, l)))
        assert np.allclose(C @ Ci, np.eye(2 * l), atol=1e-12)


def test_c_matrix_against_poisson_brackets(cset):
    eng = DiracEngine(cset)
    xi = eng.xi_functions()
    for X in manifold_points(cset, 5, seed=2):
        C, _ = c_matrix_and_inverse(cset, X)
        brute = np.array([[poisson_bracket(p, q, X) for q in xi] for p in xi])
        assert np.allclose(C, brute, atol=1e-9)


def test_dimer_multiplier_by_hand(dimer):
    X = PhasePoint([0.5, 0.0, -0.5, 0.0], [0.0, 0.5, 0.0, -0.5], np.ones(4))
    lam = lagrange_multipliers(dimer, X, np.zeros(4))
    assert lam == pytest.approx([0.5], abs=1e-15)
    assert constraint_force(dimer, X, np.zeros(4))[:2] == pytest.approx([-0.5, 0.0], abs=1e-15)


def test_trivial_multipliers(cset):
    X = manifold_points(cset, 1, seed=3)[0].replace(P=np.zeros(cset.N))
    assert np.array_equal(lagrange_multipliers(cset, X, np.zeros(cset.N)), np.zeros(cset.l))


def test_linear_constraint_orthogonal_force():
    u = np.array([1.0, -2.0, 0.5])
    cs = ConstraintSet([plane_constraint(u)], np.ones(3))
    F = np.cross(u, [0.0, 0.0, 1.0])
    X = PhasePoint(np.zeros(3), [1.0, 0.5, 0.0], np.ones(3))
    assert lagrange_multipliers(cs, X, F) == pytest.approx([0.0], abs=1e-15)


def test_multipliers_keep_second_derivative_zero(cset):
    rng = np.random.default_rng(4)
    for X in manifold_points(cset, 10, seed=5):
        F = rng.normal(size=cset.N)
        acc = (F + constraint_force(cset, X, F)) / cset.masses
        # d2 sigma/dt2 = v.H.v + A.a
        v = X.velocity
        dd = np.einsum("i,aij,j->a", v, cset.hessians(X.R), v) + cset.gradients(X.R) @ acc
        assert np.allclose(dd, 0.0, atol=1e-12)


def test_force_length_checked(dimer):
    with pytest.raises(DimensionError):
        lagrange_multipliers(dimer, X_DIMER, np.zeros(3))


def test_degenerate_z_raises(dimer):
    X = PhasePoint(np.zeros(4), np.zeros(4), np.ones(4))
    with pytest.raises(DegenerateConstraintError):
        constraint_blocks(dimer, X)


def test_projector_properties(cset):
    for X in manifold_points(cset, 5, seed=6):
        Pi = tangent_projector(cset, X.R)
        assert np.allclose(Pi @ Pi, Pi, atol=1e-12)
        P = project_momenta(cset, X.R, np.random.default_rng(0).normal(size=cset.N))
        assert np.allclose(cset.sigma_dot(X.R, P), 0.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_lands_on_manifold(seed):
    cs = constraint_gallery("dimer-bond")
    R = cs.reference_point() + 0.2 * np.random.default_rng(seed).normal(size=(8, 4))
    Y, ok = project_positions(cs, R)
    assert ok.all()
    assert np.max(np.abs(cs.sigma(Y))) <= 1e-12


def test_fd_hessian_matches_analytic(cset):
    for c in cset.constraints:
        for X in manifold_points(cset, 3, seed=7):
            assert np.allclose(fd_hessian(c.grad, X.R), c.hess(X.R), atol=1e-8)


def test_unknown_gallery_name():
    with pytest.raises(KeyError):
        constraint_gallery("pendulum")


def test_batched_shapes(dimer):
    R = np.tile(dimer.reference_point(), (3, 5, 1))
    assert dimer.gradients(R).shape == (3, 5, 1, 4)
    assert dimer.hessians(R).shape == (3, 5, 1, 4, 4)
    assert dimer.z_matrix(R).shape == (3, 5, 1, 1)
