"""Holonomic constraints and the matrices built from them.

All constraint callables accept positions with arbitrary leading batch
dimensions, ``R[..., N]``; the ``ConstraintSet`` methods keep those
dimensions and append the constraint axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateConstraintError, DimensionError
from .phase import FD_SCALE, PhasePoint

RCOND_MIN = 1e-12


@dataclass(frozen=True)
class HolonomicConstraint:
    """sigma(R) = 0 with its gradient and (optionally) analytic Hessian."""

    sigma: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "sigma"

    def hess(self, R) -> np.ndarray:
        if self.hessian is not None:
            return np.asarray(self.hessian(R), dtype=float)
        return fd_hessian(self.grad, R)


def fd_hessian(grad, R, h=None) -> np.ndarray:
    """Hessian by central differences of an analytic gradient.

    Accuracy is O(h^2) with h ~ eps^(1/3); expect ~1e-10 relative error,
    far worse than an analytic Hessian near stiff constraints.
    """
    R = np.asarray(R, dtype=float)
    N = R.shape[-1]
    out = np.empty(R.shape + (N,))
    for k in range(N):
        step = FD_SCALE * np.maximum(1.0, np.abs(R[..., k])) if h is None else h
        Rp = R.copy()
        Rm = R.copy()
        Rp[..., k] += step
        Rm[..., k] -= step
        out[..., :, k] = (grad(Rp) - grad(Rm)) / (Rp[..., k] - Rm[..., k])[..., None]
    return 0.5 * (out + np.swapaxes(out, -1, -2))


@dataclass(frozen=True)
class ConstraintSet:
    """An ordered set of l holonomic constraints plus the masses they act on.

    ``reference`` is an optional on-manifold configuration used to seed
    samplers and examples.
    """

    constraints: tuple
    masses: np.ndarray
    reference: Optional[np.ndarray] = None
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.atleast_1d(np.array(self.masses, dtype=float))
        if m.ndim != 1 or np.any(~(m > 0)):
            raise DimensionError("masses must be a 1-d array of positive values")
        m.setflags(write=False)
        object.__setattr__(self, "masses", m)
        minv = 1.0 / m
        minv.setflags(write=False)
        object.__setattr__(self, "_minv", minv)
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.reference is not None:
            ref = np.array(self.reference, dtype=float)
            if ref.shape != m.shape:
                raise DimensionError("reference configuration has wrong length")
            ref.setflags(write=False)
            object.__setattr__(self, "reference", ref)

    @property
    def l(self) -> int:
        return len(self.constraints)

    @property
    def N(self) -> int:
        return self.masses.size

    @property
    def inv_masses(self) -> np.ndarray:
        return self._minv

    def sigma(self, R) -> np.ndarray:
        R = np.asarray(R, dtype=float)
        if not self.l:
            return np.zeros(R.shape[:-1] + (0,))
        return np.stack([np.asarray(c.sigma(R), dtype=float) for c in self.constraints], axis=-1)

    def gradients(self, R) -> np.ndarray:
        """Constraint gradients, shape (..., l, N)."""
        R = np.asarray(R, dtype=float)
        if not self.l:
            return np.zeros(R.shape[:-1] + (0, R.shape[-1]))
        if self.l == 1:
            return np.asarray(self.constraints[0].grad(R), dtype=float)[..., None, :]
        return np.stack([np.asarray(c.grad(R), dtype=float) for c in self.constraints], axis=-2)

    def hessians(self, R) -> np.ndarray:
        """Constraint Hessians, shape (..., l, N, N)."""
        R = np.asarray(R, dtype=float)
        N = R.shape[-1]
        if not self.l:
            return np.zeros(R.shape[:-1] + (0, N, N))
        if self.l == 1:
            return self.constraints[0].hess(R)[..., None, :, :]
        return np.stack([c.hess(R) for c in self.constraints], axis=-3)

    def sigma_dot(self, R, P) -> np.ndarray:
        return np.einsum("...ai,...i->...a", self.gradients(R), np.asarray(P) / self.masses)

    def z_matrix(self, R, A=None) -> np.ndarray:
        A = self.gradients(R) if A is None else A
        return np.einsum("...ai,i,...bi->...ab", A, self.inv_masses, A)

    def reference_point(self) -> np.ndarray:
        if self.reference is None:
            return np.zeros(self.N)
        return np.array(self.reference)


def _check_z(Z):
    """Raise if any Z in the batch is numerically singular."""
    l = Z.shape[-1]
    if l == 0:
        return
    Zs = Z.reshape((-1, l, l))
    if l == 1:
        if (Zs > 0).all() and (Zs < np.inf).all():
            return
        s = np.abs(Zs[:, 0, :])
    else:
        s = np.sort(np.abs(np.linalg.eigvalsh(Zs)), axis=1)[:, ::-1]
    # Z is symmetric, so |eigenvalues| are its singular values
    rcond = s[:, -1] / np.where(s[:, 0] > 0, s[:, 0], 1.0)
    bad = np.flatnonzero(~(rcond >= RCOND_MIN) | ~(s[:, 0] > 0) | ~np.isfinite(s[:, 0]))
    if bad.size:
        Zb = Zs[bad[0]]
        pair = (0, 0)
        if l > 1:
            d = np.sqrt(np.abs(np.diag(Zb)))
            d[d == 0] = 1.0
            corr = np.abs(Zb / np.outer(d, d))
            np.fill_diagonal(corr, -1.0)
            pair = tuple(int(i) for i in np.unravel_index(np.argmax(corr), corr.shape))
        raise DegenerateConstraintError(
            f"constraint matrix Z is singular (reciprocal condition {rcond[bad[0]]:.3e})", pair
        )


def sigma_dot(c: HolonomicConstraint, X: PhasePoint) -> float:
    """Time derivative of one constraint, sum_i dsigma/dR_i P_i / M_i."""
    return float(np.asarray(c.grad(X.R)) @ X.velocity)


def _gamma(A, Hs, minv, v):
    # Gamma_ab = (1/M) grad_b . Hess_a . v - (1/M) grad_a . Hess_b . v
    Hv = np.einsum("...aij,...j->...ai", Hs, v)
    T = np.einsum("...bi,i,...ai->...ab", A, minv, Hv)
    return T - np.swapaxes(T, -1, -2)


def constraint_blocks(cset: ConstraintSet, X: PhasePoint):
    """Return (Z, Gamma) at X; Z symmetric, Gamma antisymmetric."""
    A = cset.gradients(X.R)
    Z = cset.z_matrix(X.R, A)
    _check_z(Z)
    Gamma = _gamma(A, cset.hessians(X.R), cset.inv_masses, X.velocity)
    return Z, Gamma


def inverse_blocks(Z, Gamma):
    """C^{-1} from the block form [[Zi G Zi, -Zi], [Zi, 0]]."""
    Zi = np.linalg.inv(Z)
    l = Z.shape[-1]
    Ci = np.zeros(Z.shape[:-2] + (2 * l, 2 * l))
    Ci[..., :l, :l] = Zi @ Gamma @ Zi
    Ci[..., :l, l:] = -Zi
    Ci[..., l:, :l] = Zi
    return Ci


def c_matrix_and_inverse(cset: ConstraintSet, X: PhasePoint):
    """The 2l x 2l bracket matrix of (sigma, sigma_dot) and its block inverse."""
    Z, Gamma = constraint_blocks(cset, X)
    l = cset.l
    C = np.zeros((2 * l, 2 * l))
    C[:l, l:] = Z
    C[l:, :l] = -Z
    C[l:, l:] = Gamma
    return C, inverse_blocks(Z, Gamma)


def multipliers(cset: ConstraintSet, R, P, F, A=None, Hs=None) -> np.ndarray:
    """Batched exact Lagrange multipliers, shape (..., l)."""
    R = np.asarray(R, dtype=float)
    if not cset.l:
        return np.zeros(R.shape[:-1] + (0,))
    A = cset.gradients(R) if A is None else A
    Hs = cset.hessians(R) if Hs is None else Hs
    minv = cset.inv_masses
    v = np.asarray(P) * minv
    rhs = np.einsum("...i,...aij,...j->...a", v, Hs, v) + np.einsum("...ai,...i->...a", A, np.asarray(F) * minv)
    Z = cset.z_matrix(R, A)
    _check_z(Z)
    if cset.l == 1:
        return rhs / Z[..., 0]
    return np.linalg.solve(Z, rhs[..., None])[..., 0]


def lagrange_multipliers(cset: ConstraintSet, X: PhasePoint, F) -> np.ndarray:
    """lambda = Z^{-1} [ v v : Hess sigma + (F/M) . grad sigma ], v = P/M."""
    F = np.asarray(F, dtype=float)
    if F.shape != X.R.shape:
        raise DimensionError("force vector must have length N")
    return multipliers(cset, X.R, X.P, F)


def constraint_force(cset: ConstraintSet, X: PhasePoint, F) -> np.ndarray:
    lam = lagrange_multipliers(cset, X, F)
    return -lam @ cset.gradients(X.R) if cset.l else np.zeros(X.N)


def tangent_projector(cset: ConstraintSet, R) -> np.ndarray:
    """Mass-weighted projector Pi = A Z^{-1} A^T M^{-1}, shape (..., N, N).

    ``P - Pi @ P`` removes the momentum component that violates
    sigma_dot = 0 (it is the M^{-1}-orthogonal projection).
    """
    R = np.asarray(R, dtype=float)
    N = R.shape[-1]
    if not cset.l:
        return np.zeros(R.shape[:-1] + (N, N))
    A = cset.gradients(R)
    Z = cset.z_matrix(R, A)
    _check_z(Z)
    ZiA = np.linalg.solve(Z, A)
    return np.einsum("...ai,...aj,j->...ij", A, ZiA, cset.inv_masses)


def project_momenta(cset: ConstraintSet, R, P) -> np.ndarray:
    if not cset.l:
        return np.array(P, dtype=float)
    return P - np.einsum("...ij,...j->...i", tangent_projector(cset, R), P)


def project_positions(cset: ConstraintSet, R, direction=None, tol=1e-12, max_iter=50):
    """Newton projection onto sigma = 0 moving along ``direction`` columns.

    ``direction`` defaults to the constraint gradients at the starting
    point (shape (..., l, N)).  Returns (R_projected, converged_mask).
    """
    R = np.array(R, dtype=float)
    if not cset.l:
        return R, np.ones(R.shape[:-1], dtype=bool)
    D = cset.gradients(R) if direction is None else direction
    c = np.zeros(R.shape[:-1] + (cset.l,))
    Y = R.copy()
    ok = np.zeros(R.shape[:-1], dtype=bool)
    for _ in range(max_iter):
        Y = R + np.einsum("...a,...ai->...i", c, D)
        s = cset.sigma(Y)
        ok = np.all(np.abs(s) <= tol, axis=-1)
        if np.all(ok):
            break
        J = np.einsum("...ai,...bi->...ab", cset.gradients(Y), D)
        try:
            dc = np.linalg.solve(J, -s[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        dc = np.where(ok[..., None], 0.0, dc)
        c = c + np.where(np.isfinite(dc), dc, 0.0)
    return Y, ok & np.all(np.isfinite(Y), axis=-1)


# ---------------------------------------------------------------- gallery


def bond_constraint(i: int, j: int, length: float, dim: int) -> HolonomicConstraint:
    """sigma = (|r_i - r_j|^2 - a^2) / 2 for particles i, j in ``dim`` dimensions."""
    si = slice(i * dim, (i + 1) * dim)
    sj = slice(j * dim, (j + 1) * dim)

    def sigma(R):
        r = R[..., si] - R[..., sj]
        return 0.5 * (np.sum(r * r, axis=-1) - length**2)

    def grad(R):
        r = R[..., si] - R[..., sj]
        g = np.zeros(R.shape)
        g[..., si] = r
        g[..., sj] = -r
        return g

    cache = {}

    def hessian(R):
        N = R.shape[-1]
        if N not in cache:
            H = np.zeros((N, N))
            I = np.eye(dim)
            H[si, si] = I
            H[sj, sj] = I
            H[si, sj] = -I
            H[sj, si] = -I
            H.setflags(write=False)
            cache[N] = H
        return np.broadcast_to(cache[N], R.shape[:-1] + (N, N))

    return HolonomicConstraint(sigma, grad, hessian, f"bond({i},{j})")


def parabola_constraint(curvature: float = 1.0, x: int = 0, y: int = 1) -> HolonomicConstraint:
    """sigma = R_y - c R_x^2."""

    def sigma(R):
        return R[..., y] - curvature * R[..., x] ** 2

    def grad(R):
        g = np.zeros(R.shape)
        g[..., x] = -2.0 * curvature * R[..., x]
        g[..., y] = 1.0
        return g

    def hessian(R):
        N = R.shape[-1]
        H = np.zeros((N, N))
        H[x, x] = -2.0 * curvature
        return np.broadcast_to(H, R.shape[:-1] + (N, N))

    return HolonomicConstraint(sigma, grad, hessian, "parabola")


def plane_constraint(normal, offset: float = 0.0) -> HolonomicConstraint:
    """sigma = u . R - b."""
    u = np.asarray(normal, dtype=float)

    def sigma(R):
        return R @ u - offset

    def grad(R):
        return np.broadcast_to(u, np.shape(R)).copy()

    zero = np.zeros((u.size, u.size))

    def hessian(R):
        return np.broadcast_to(zero, np.shape(R)[:-1] + zero.shape)

    return HolonomicConstraint(sigma, grad, hessian, "plane")


def dimer_bond(bond_length: float = 1.0, mass=1.0, dim: int = 2, n_particles: int = 2,
               bonds: Optional[Sequence] = None) -> ConstraintSet:
    """Particles joined by rigid bonds (a single bond 0-1 by default).

    ``mass`` is per particle (scalar or list) and is expanded to one entry
    per Cartesian degree of freedom.
    """
    bonds = [(0, 1)] if bonds is None else [tuple(b) for b in bonds]
    pm = np.broadcast_to(np.asarray(mass, dtype=float), (n_particles,))
    masses = np.repeat(pm, dim)
    # zig-zag chain along x with every listed bond at its length
    ref = np.zeros((n_particles, dim))
    for k in range(n_particles):
        ref[k, 0] = k * bond_length * (np.sqrt(3) / 2 if dim > 1 and n_particles > 2 else 1.0)
        if dim > 1 and n_particles > 2:
            ref[k, 1] = 0.5 * bond_length * (k % 2)
    ref -= ref.mean(axis=0)
    cons = [bond_constraint(i, j, bond_length, dim) for i, j in bonds]
    cset = ConstraintSet(cons, masses, None, "dimer-bond",
                         dict(bond_length=bond_length, dim=dim, n_particles=n_particles))
    Rr, ok = project_positions(cset, ref.ravel())
    if not ok:
        raise DimensionError("could not place bonds on the constraint manifold")
    return ConstraintSet(cons, masses, Rr, cset.name, cset.params)


def parabola_bead(curvature: float = 1.0, masses=(1.0, 1.0)) -> ConstraintSet:
    return ConstraintSet([parabola_constraint(curvature)], masses, np.zeros(2), "parabola-bead",
                         dict(curvature=curvature))


def linear_plane(normals, offsets=None, masses=None) -> ConstraintSet:
    U = np.atleast_2d(np.asarray(normals, dtype=float))
    b = np.zeros(len(U)) if offsets is None else np.asarray(offsets, dtype=float)
    masses = np.ones(U.shape[1]) if masses is None else masses
    ref = np.linalg.lstsq(U, b, rcond=None)[0]
    return ConstraintSet([plane_constraint(u, o) for u, o in zip(U, b)], masses, ref, "linear-plane",
                         dict(normals=U.tolist(), offsets=b.tolist()))


def unconstrained(masses) -> ConstraintSet:
    return ConstraintSet([], masses, None, "none")


def constraint_gallery(name: str, **params) -> ConstraintSet:
    """Look up a gallery constraint set by its config name."""
    builders = {
        "dimer-bond": dimer_bond,
        "parabola-bead": parabola_bead,
        "linear-plane": linear_plane,
        "none": unconstrained,
    }
    if name not in builders:
        raise KeyError(f"unknown constraint model '{name}' (choose from {sorted(builders)})")
    return builders[name](**params)
