"""Dirac brackets for scalar and matrix-valued phase-space functions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .constraints import ConstraintSet, _check_z, _gamma, inverse_blocks
from .errors import DegenerateConstraintError, DimensionError, EvaluationError
from .phase import FD_SCALE, PhasePoint, ScalarPhaseFunction, poisson_bracket, symplectic_matrix


class PhaseBatch(NamedTuple):
    """Arrays of phase points, R and P of shape (..., N)."""

    R: np.ndarray
    P: np.ndarray
    masses: np.ndarray

    @property
    def velocity(self):
        return self.P / self.masses

    @property
    def kinetic_energy(self):
        return 0.5 * np.sum(self.P**2 / self.masses, axis=-1)


@dataclass(frozen=True)
class MatrixPhaseFunction:
    """An n x n Hermitian-matrix-valued function of phase space.

    ``fn`` receives an object with ``R``, ``P`` and ``masses`` attributes:
    a :class:`PhasePoint`, or a :class:`PhaseBatch` with leading batch
    dimensions when ``vectorized`` is true.  ``grad`` (optional) returns the
    derivatives stacked along axis -3 in (d/dR, d/dP) order.
    """

    fn: Callable
    n: int
    grad: Optional[Callable] = None
    vectorized: bool = False
    name: str = ""

    def evaluate(self, X: PhasePoint) -> np.ndarray:
        if self.vectorized:
            out = self.fn(PhaseBatch(X.R, X.P, X.masses))
        else:
            out = self.fn(X)
        return np.asarray(out, dtype=complex).reshape(self.n, self.n)

    def evaluate_batch(self, R, P, masses) -> np.ndarray:
        R = np.asarray(R, dtype=float)
        P = np.asarray(P, dtype=float)
        if self.vectorized:
            out = np.asarray(self.fn(PhaseBatch(R, P, masses)), dtype=complex)
            return np.broadcast_to(out, R.shape[:-1] + (self.n, self.n))
        flatR = R.reshape(-1, R.shape[-1])
        flatP = P.reshape(-1, P.shape[-1])
        out = np.array([self.evaluate(PhasePoint(r, p, masses)) for r, p in zip(flatR, flatP)])
        return out.reshape(R.shape[:-1] + (self.n, self.n))

    def gradient(self, X: PhasePoint, h=None) -> np.ndarray:
        if self.grad is not None:
            g = self.grad(PhaseBatch(X.R, X.P, X.masses) if self.vectorized else X)
            return np.asarray(g, dtype=complex).reshape(2 * X.N, self.n, self.n)
        return self.gradient_batch(X.R, X.P, X.masses, h)

    def gradient_batch(self, R, P, masses, h=None) -> np.ndarray:
        R = np.asarray(R, dtype=float)
        P = np.asarray(P, dtype=float)
        if self.grad is not None and self.vectorized:
            g = np.asarray(self.grad(PhaseBatch(R, P, masses)), dtype=complex)
            return np.broadcast_to(g, R.shape[:-1] + (2 * R.shape[-1], self.n, self.n))
        return fd_matrix_gradient(self, R, P, masses, h)

    @classmethod
    def from_scalar(cls, f: ScalarPhaseFunction, n: int = 1) -> "MatrixPhaseFunction":
        """f(X) times the n x n identity."""
        eye = np.eye(n)

        def grad(X):
            return f.gradient(X)[:, None, None] * eye

        return cls(lambda X: f(X) * eye, n, grad, False, f.name)

    @classmethod
    def constant(cls, M) -> "MatrixPhaseFunction":
        M = np.asarray(M, dtype=complex)
        n = M.shape[0]

        def grad(X):
            return np.zeros(np.shape(X.R)[:-1] + (2 * np.shape(X.R)[-1], n, n), dtype=complex)

        return cls(lambda X: np.broadcast_to(M, np.shape(X.R)[:-1] + (n, n)), n, grad, True, "const")


def fd_matrix_gradient(F: MatrixPhaseFunction, R, P, masses, h=None) -> np.ndarray:
    """Central differences of a matrix function; result (..., 2N, n, n)."""
    R = np.asarray(R, dtype=float)
    P = np.asarray(P, dtype=float)
    N = R.shape[-1]
    out = np.empty(R.shape[:-1] + (2 * N, F.n, F.n), dtype=complex)
    for i in range(2 * N):
        base = R if i < N else P
        k = i % N
        step = FD_SCALE * np.maximum(1.0, np.abs(base[..., k])) if h is None else np.full(base.shape[:-1], h)
        up = base.copy()
        dn = base.copy()
        up[..., k] += step
        dn[..., k] -= step
        if i < N:
            fp = F.evaluate_batch(up, P, masses)
            fm = F.evaluate_batch(dn, P, masses)
        else:
            fp = F.evaluate_batch(R, up, masses)
            fm = F.evaluate_batch(R, dn, masses)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise EvaluationError("non-finite matrix function value in finite-difference stencil", i)
        out[..., i, :, :] = (fp - fm) / (up[..., k] - dn[..., k])[..., None, None]
    return out


# ------------------------------------------------------------ batched core


def xi_gradients(cset: ConstraintSet, R, P, A=None, Hs=None) -> np.ndarray:
    """Gradients of (sigma, sigma_dot) with respect to X, shape (..., 2l, 2N)."""
    R = np.asarray(R, dtype=float)
    N = R.shape[-1]
    l = cset.l
    A = cset.gradients(R) if A is None else A
    Hs = cset.hessians(R) if Hs is None else Hs
    v = np.asarray(P) * cset.inv_masses
    G = np.zeros(R.shape[:-1] + (2 * l, 2 * N))
    G[..., :l, :N] = A
    G[..., l:, :N] = np.einsum("...aij,...j->...ai", Hs, v)
    G[..., l:, N:] = A * cset.inv_masses
    return G


def b_dirac_batch(cset: ConstraintSet, R, P) -> np.ndarray:
    """B^D = B^s - B^s G^T C^{-1} G B^s for every point in the batch."""
    R = np.asarray(R, dtype=float)
    P = np.asarray(P, dtype=float)
    N = R.shape[-1]
    Bs = symplectic_matrix(N)
    if not cset.l:
        return np.broadcast_to(Bs, R.shape[:-1] + (2 * N, 2 * N)).copy()
    A = cset.gradients(R)
    Hs = cset.hessians(R)
    Z = cset.z_matrix(R, A)
    _check_z(Z)
    Gamma = _gamma(A, Hs, cset.inv_masses, P * cset.inv_masses)
    Ci = inverse_blocks(Z, Gamma)
    W = xi_gradients(cset, R, P, A, Hs) @ Bs
    BD = Bs + np.swapaxes(W, -1, -2) @ Ci @ W
    return 0.5 * (BD - np.swapaxes(BD, -1, -2))


def b_dirac_divergence(cset: ConstraintSet, R, P, h=None) -> np.ndarray:
    """sum_i dB^D_ij / dX_i by central differences, shape (..., 2N)."""
    R = np.asarray(R, dtype=float)
    P = np.asarray(P, dtype=float)
    N = R.shape[-1]
    div = np.zeros(R.shape[:-1] + (2 * N,))
    if not cset.l:
        return div
    for i in range(2 * N):
        base = R if i < N else P
        k = i % N
        step = FD_SCALE * np.maximum(1.0, np.abs(base[..., k])) if h is None else np.full(base.shape[:-1], h)
        up = base.copy()
        dn = base.copy()
        up[..., k] += step
        dn[..., k] -= step
        if i < N:
            Bp, Bm = b_dirac_batch(cset, up, P), b_dirac_batch(cset, dn, P)
        else:
            Bp, Bm = b_dirac_batch(cset, R, up), b_dirac_batch(cset, R, dn)
        div += (Bp[..., i, :] - Bm[..., i, :]) / (up[..., k] - dn[..., k])[..., None]
    if not np.all(np.isfinite(div)):
        raise EvaluationError("non-finite divergence of B^D")
    return div


def grad_log_det_z(cset: ConstraintSet, R) -> np.ndarray:
    """Analytic d ln det Z / dR from constraint Hessians, shape (..., N)."""
    R = np.asarray(R, dtype=float)
    if not cset.l:
        return np.zeros(R.shape)
    A = cset.gradients(R)
    Hs = cset.hessians(R)
    minv = cset.inv_masses
    # dZ_ab/dR_k = sum_i (1/M_i)(H_a[i,k] A_b[i] + A_a[i] H_b[i,k])
    T = np.einsum("...aik,i,...bi->...kab", Hs, minv, A)
    dZ = T + np.swapaxes(T, -1, -2)
    Z = cset.z_matrix(R, A)
    _check_z(Z)
    Zi = np.linalg.inv(Z)
    return np.einsum("...ba,...kab->...k", Zi, dZ)


# ------------------------------------------------------------ engine


class DiracEngine:
    """Evaluates the Dirac bracket structure of one constraint set.

    The engine holds no per-point state, so one instance can serve many
    trajectories at once.
    """

    def __init__(self, cset: ConstraintSet):
        self.cset = cset

    @property
    def l(self):
        return self.cset.l

    def b_dirac(self, X: PhasePoint) -> np.ndarray:
        return b_dirac_batch(self.cset, X.R, X.P)

    def xi_functions(self):
        """sigma_a and sigma_dot_a as ScalarPhaseFunctions with analytic gradients."""
        fns = []
        for c in self.cset.constraints:
            def s_val(X, c=c):
                return float(c.sigma(X.R))

            def s_grad(X, c=c):
                return np.concatenate([c.grad(X.R), np.zeros(X.N)])

            fns.append(ScalarPhaseFunction(s_val, s_grad, c.name))
        for c in self.cset.constraints:
            def d_val(X, c=c):
                return float(np.asarray(c.grad(X.R)) @ X.velocity)

            def d_grad(X, c=c):
                return np.concatenate([c.hess(X.R) @ X.velocity, np.asarray(c.grad(X.R)) / X.masses])

            fns.append(ScalarPhaseFunction(d_val, d_grad, c.name + "_dot"))
        return fns


def b_dirac_matrix(engine: DiracEngine, X: PhasePoint) -> np.ndarray:
    return engine.b_dirac(X)


def dirac_bracket(engine: DiracEngine, a, b, X: PhasePoint) -> float:
    """{a, b}_D = grad a . B^D . grad b."""
    ga = np.asarray(a.gradient(X), dtype=float)
    gb = np.asarray(b.gradient(X), dtype=float)
    return float(ga @ engine.b_dirac(X) @ gb)


def dirac_bracket_equiv(engine: DiracEngine, a, b, X: PhasePoint) -> float:
    """{a,b} - sum {a, xi_a} (C^{-1})_ab {xi_b, b}, with C built from Poisson brackets.

    Independent of :func:`b_dirac_batch`: C is assembled bracket by bracket
    and inverted directly.
    """
    pb = poisson_bracket(a, b, X)
    if not engine.l:
        return pb
    xi = engine.xi_functions()
    C = np.array([[poisson_bracket(p, q, X) for q in xi] for p in xi])
    try:
        Ci = np.linalg.inv(C)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConstraintError("bracket matrix C is singular") from exc
    left = np.array([poisson_bracket(a, p, X) for p in xi])
    right = np.array([poisson_bracket(p, b, X) for p in xi])
    return float(pb - left @ Ci @ right)


def matrix_bracket(BD, gA, gB) -> np.ndarray:
    """sum_ij dA/dX_i B_ij dB/dX_j with operator ordering kept; batched."""
    return np.einsum("...ij,...iab,...jbc->...ac", BD, gA, gB)


def matrix_dirac_bracket(engine: DiracEngine, H: MatrixPhaseFunction, chi: MatrixPhaseFunction,
                         X: PhasePoint, hbar: float) -> np.ndarray:
    """(H, chi)_D = (i/hbar)[H, chi] - 1/2 ({H, chi}_D - {chi, H}_D)."""
    if H.n != chi.n:
        raise DimensionError(f"matrix dimensions differ: {H.n} vs {chi.n}")
    Hm = H.evaluate(X)
    Cm = chi.evaluate(X)
    gH = H.gradient(X)
    gC = chi.gradient(X)
    BD = engine.b_dirac(X)
    comm = Hm @ Cm - Cm @ Hm
    return 1j / hbar * comm - 0.5 * (matrix_bracket(BD, gH, gC) - matrix_bracket(BD, gC, gH))


def _kappa_from_gradient(div, g):
    g = np.asarray(g)
    if g.ndim == 1:
        return float(div @ g)
    return np.einsum("j,jab->ab", div, g)


def compressibility_kappa0(engine: DiracEngine, H, X: PhasePoint, h=None) -> float:
    """sum_ij dB^D_ij/dX_i dH/dX_j, the phase-space compressibility.

    For a matrix Hamiltonian of the form P^2/2M + h(R) the divergence has no
    R components, so the result is a multiple of the identity and its
    scalar value is returned.
    """
    div = b_dirac_divergence(engine.cset, X.R, X.P, h)
    k = _kappa_from_gradient(div, H.gradient(X))
    if np.ndim(k) == 0:
        return float(k)
    return float(np.real(np.trace(k)) / k.shape[0])


def kappa0_from_det_z(engine: DiracEngine, X: PhasePoint) -> float:
    """-d/dt ln det Z = -(d ln det Z / dR) . P/M, from analytic Z derivatives."""
    return float(-grad_log_det_z(engine.cset, X.R) @ X.velocity)


def measure_weight(engine: DiracEngine, X: PhasePoint) -> float:
    """det Z(X); exp(-w_D) with w_D = -ln det Z.  Unconstrained systems give 1."""
    if not engine.l:
        return 1.0
    det = float(np.linalg.det(engine.cset.z_matrix(X.R)))
    if not det > 0:
        raise DegenerateConstraintError(f"det Z = {det} is not positive")
    return det
