"""Quantum subsystem: diabatic models, adiabatic frames, couplings and frequencies."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .constraints import ConstraintSet, tangent_projector
from .dirac import MatrixPhaseFunction
from .errors import DegeneracyError, DimensionError, PathTooCoarseError
from .phase import PhasePoint

GAP_FLOOR = 1e-10
FREQUENCY_MODES = ("literal", "projected", "tangent")


@dataclass(frozen=True)
class DiabaticModel:
    """h(R) in a fixed real diabatic basis.

    ``h`` maps R[..., N] to (..., n, n); ``grad_h`` maps R[..., N] to
    (..., N, n, n).  ``h_and_grad`` optionally returns both at once, and
    ``pair_forces(R, a, b)`` may supply (mean force, E_a - E_b, smallest
    adiabatic gap) in closed form for :func:`pair_mean_forces`.
    """

    n: int
    N: int
    h: Callable[[np.ndarray], np.ndarray]
    grad_h: Callable[[np.ndarray], np.ndarray]
    name: str = ""
    params: dict = field(default_factory=dict)
    h_and_grad: Optional[Callable] = None
    pair_forces: Optional[Callable] = None

    def evaluate(self, R):
        if self.h_and_grad is not None:
            return self.h_and_grad(R)
        return self.h(R), self.grad_h(R)


@dataclass(frozen=True)
class AdiabaticFrame:
    R: np.ndarray
    E: np.ndarray       # (n,) ascending
    U: np.ndarray       # (n, n), columns are adiabatic states
    d: np.ndarray       # (n, n, N)
    Fad: np.ndarray     # (n, N)
    Fmat: np.ndarray    # (n, n, N)
    omega: np.ndarray   # (n, n)
    hbar: float = 1.0

    @property
    def n(self) -> int:
        return self.E.size


def _signs(U, prev_U=None):
    if prev_U is None:
        ref = U[..., 0, :]
    else:
        ref = np.einsum("...ka,...ka->...a", prev_U, U)
    return np.where(ref < 0, -1.0, 1.0)


def adiabatic_arrays(model: DiabaticModel, R, prev_U=None, gap_floor: float = GAP_FLOOR):
    """Batched diagonalization.

    Returns (E, U, d, Fad, gap_ok) with shapes (..., n), (..., n, n),
    (..., n, n, N), (..., n, N) and (...).  Couplings at points whose
    smallest gap is below ``gap_floor`` are set to zero and flagged.
    """
    R = np.asarray(R, dtype=float)
    h, g = model.evaluate(R)
    E, U = np.linalg.eigh(np.asarray(h, dtype=float))
    U = U * _signs(U, prev_U)[..., None, :]
    G = np.einsum("...ka,...ikl,...lb->...abi", U, np.asarray(g, dtype=float), U)
    gaps = E[..., None, :] - E[..., :, None]  # E_b - E_a
    n = model.n
    off = ~np.eye(n, dtype=bool)
    gap_ok = np.all(np.abs(gaps[..., off]) >= gap_floor, axis=-1) if n > 1 else np.ones(R.shape[:-1], bool)
    safe = np.where(off & (np.abs(gaps) >= gap_floor), gaps, np.inf)
    d = G / safe[..., None]
    Fad = -np.einsum("...aai->...ai", G)
    return E, U, d, Fad, gap_ok


def adiabatic_forces(model: DiabaticModel, R, gap_floor: float = GAP_FLOOR):
    """Energies, Hellmann-Feynman forces and gap flags only, shapes (..., n), (..., n, N), (...)."""
    R = np.asarray(R, dtype=float)
    h, g = model.evaluate(R)
    if model.n == 2:
        return _forces_2x2(h, g, gap_floor)
    E, U = np.linalg.eigh(h)
    Fad = -np.einsum("...ka,...ikl,...la->...ai", U, g, U)
    if model.n > 1:
        ok = np.min(np.diff(E, axis=-1), axis=-1) >= gap_floor
    else:
        ok = np.ones(R.shape[:-1], dtype=bool)
    return E, Fad, ok


def _forces_2x2(h, g, gap_floor):
    # closed form for [[a, b], [b, c]]: E = m -/+ r, r = sqrt(q^2 + b^2), q = (a - c)/2
    a, b, c = h[..., 0, 0], h[..., 0, 1], h[..., 1, 1]
    q = 0.5 * (a - c)
    r = np.sqrt(q * q + b * b)
    ok = 2 * r >= gap_floor
    ga, gb, gc = g[..., 0, 0], g[..., 0, 1], g[..., 1, 1]
    dm = 0.5 * (ga + gc)
    dr = (q[..., None] * (0.5 * (ga - gc)) + b[..., None] * gb) / np.where(ok, r, 1.0)[..., None]
    m = 0.5 * (a + c)
    E = np.empty(h.shape[:-1])
    E[..., 0] = m - r
    E[..., 1] = m + r
    Fad = np.empty(g.shape[:-3] + (2, g.shape[-3]))
    Fad[..., 0, :] = dr - dm
    Fad[..., 1, :] = -dm - dr
    return E, Fad, ok


# maps flattened [[a, b], [b, c]] to (mean, half difference, off-diagonal)
_MQO = np.array([[0.5, 0.5, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [0.5, -0.5, 0.0]])


def pair_mean_forces(model: DiabaticModel, R, pairs, gap_floor: float = GAP_FLOOR):
    """Mean force (F^a + F^a')/2 and gap E_a - E_a' for pairs (K, 2) at R (K, N)."""
    R = np.asarray(R, dtype=float)
    a, b = pairs[:, 0], pairs[:, 1]
    if model.pair_forces is not None:
        F, dE, gap = model.pair_forces(R, a, b)
        return F, dE, gap >= gap_floor
    h, g = model.evaluate(R)
    if model.n == 2:
        # E_0 = m - r, E_1 = m + r with r = hypot(q, o); the mean force is -dm + (1 - a - b) dr
        mqo = h.reshape(-1, 4) @ _MQO
        dmqo = g.reshape(g.shape[0], -1, 4) @ _MQO
        r = np.hypot(mqo[:, 1], mqo[:, 2])
        ok = 2 * r >= gap_floor
        rs = r if ok.all() else np.where(ok, r, 1.0)
        dr = (dmqo[:, :, 1:] @ mqo[:, 1:, None])[:, :, 0] / rs[:, None]
        return (1 - a - b)[:, None] * dr - dmqo[:, :, 0], 2.0 * r * (a - b), ok
    E, Fad, ok = adiabatic_forces(model, R, gap_floor)
    k = np.arange(R.shape[0])
    return 0.5 * (Fad[k, a] + Fad[k, b]), E[k, a] - E[k, b], ok


def force_matrix(Fad, d, E):
    """F^{ab} = F^a delta_ab + (E_a - E_b) d_ab; hbar*omega = E_a - E_b."""
    n = E.shape[-1]
    dE = E[..., :, None] - E[..., None, :]
    return np.eye(n)[..., None] * Fad[..., :, None, :] + dE[..., None] * d


def adiabatize(model: DiabaticModel, R, prev: AdiabaticFrame = None, hbar: float = 1.0,
               gap_floor: float = GAP_FLOOR) -> AdiabaticFrame:
    """Diagonalize h(R) and build couplings, forces and Bohr frequencies."""
    R = np.asarray(R, dtype=float)
    if R.shape != (model.N,):
        raise DimensionError(f"model expects {model.N} coordinates, got shape {R.shape}")
    E, U, d, Fad, ok = adiabatic_arrays(model, R, None if prev is None else prev.U, gap_floor)
    if not ok:
        gaps = np.where(np.eye(model.n, dtype=bool), np.inf, np.abs(E[:, None] - E[None, :]))
        a, b = np.unravel_index(np.argmin(gaps), gaps.shape)
        raise DegeneracyError(f"adiabatic gap {gaps[a, b]:.3e} below floor {gap_floor:.1e}", (int(a), int(b)))
    omega = (E[:, None] - E[None, :]) / hbar
    return AdiabaticFrame(R, E, U, d, Fad, force_matrix(Fad, d, E), omega, hbar)


def _project(cset, R, vec):
    return np.einsum("...ij,...j->...i", tangent_projector(cset, R), vec)


def constrained_frequency(frame: AdiabaticFrame, alpha: int, beta: int, cset: ConstraintSet, X: PhasePoint,
                          mode: str = "projected"):
    """Constrained Bohr frequency for the pair (alpha, beta).

    ``literal``: scalar omega (1 + l), the full contraction of the
    mass-weighted gradient projector.
    ``projected``: vector omega (1 + Pi) d_ab.
    ``tangent``: vector omega (1 - Pi) d_ab, the component that keeps
    sigma_dot = 0 under a momentum shift.
    Pi = A Z^{-1} A^T M^{-1}.
    """
    w = frame.omega[alpha, beta]
    if mode == "literal":
        return float(w * (1 + cset.l))
    if mode not in FREQUENCY_MODES:
        raise ValueError(f"unknown frequency mode '{mode}'")
    d = frame.d[alpha, beta]
    if not cset.l:
        return w * d
    Pd = _project(cset, X.R, d)
    return w * (d + Pd) if mode == "projected" else w * (d - Pd)


def frame_transport(frames: Sequence[AdiabaticFrame]) -> list:
    """Fix eigenvector signs along a path so consecutive overlaps are positive."""
    out = []
    for k, fr in enumerate(frames):
        if k == 0:
            out.append(fr)
            continue
        ov = np.einsum("ka,ka->a", out[-1].U, fr.U)
        if np.any(np.abs(ov) < 0.5):
            raise PathTooCoarseError(f"overlap {np.min(np.abs(ov)):.3f} < 0.5 between frames {k - 1} and {k}")
        s = np.where(ov < 0, -1.0, 1.0)
        ss = np.outer(s, s)
        d = fr.d * ss[..., None]
        out.append(AdiabaticFrame(fr.R, fr.E, fr.U * s, d, fr.Fad, force_matrix(fr.Fad, d, fr.E), fr.omega, fr.hbar))
    return out


def hamiltonian_function(model: DiabaticModel) -> MatrixPhaseFunction:
    """H0(X) = P^2/2M + h(R) as a vectorized matrix phase function."""
    n = model.n
    eye = np.eye(n)

    def fn(X):
        return X.kinetic_energy[..., None, None] * eye + model.h(X.R)

    def grad(X):
        gR = np.asarray(model.grad_h(X.R), dtype=complex)
        gP = np.asarray(X.velocity)[..., None, None] * eye
        return np.concatenate([gR, gP], axis=-3)

    return MatrixPhaseFunction(fn, n, grad, True, "H0")


# ---------------------------------------------------------------- gallery


def _spring(R, k, center):
    x = R - center
    return 0.5 * k * np.sum(x * x, axis=-1), k * x


def two_level_linear(N: int, coupling: float = 1.0, delta: float = 0.5, coord: int = 0,
                     spring: float = 1.0, center=0.0, offset: float = 0.0) -> DiabaticModel:
    """h = [[c R_coord + e0, D], [D, -(c R_coord + e0)]] + (k/2)|R - R0|^2 I."""
    center = np.broadcast_to(np.asarray(center, dtype=float), (N,)).copy()
    eye = np.eye(2)
    sz = np.diag([1.0, -1.0])
    sx = np.array([[0.0, 1.0], [1.0, 0.0]])

    def both(R):
        R = np.asarray(R, dtype=float)
        V, dV = _spring(R, spring, center)
        eps = coupling * R[..., coord] + offset
        h = V[..., None, None] * eye + eps[..., None, None] * sz + delta * sx
        g = dV[..., None, None] * eye
        g[..., coord, :, :] += coupling * sz
        return h, g

    def pair_forces(R, a, b):
        x = R - center
        eps = coupling * R[:, coord] + offset
        r = np.hypot(eps, delta)
        F = -spring * x
        F[:, coord] += (1 - a - b) * coupling * eps / np.where(r > 0, r, 1.0)
        return F, 2.0 * r * (a - b), 2.0 * r

    return DiabaticModel(2, N, lambda R: both(R)[0], lambda R: both(R)[1], "two-level-linear",
                         dict(coupling=coupling, delta=delta, coord=coord, spring=spring, offset=offset), both,
                         pair_forces)


def two_level_constant(N: int, epsilon: float = 0.5, delta: float = 0.5, spring: float = 1.0,
                       center=0.0) -> DiabaticModel:
    """Constant 2x2 coupling plus a state-independent harmonic trap; d = 0 everywhere."""
    center = np.broadcast_to(np.asarray(center, dtype=float), (N,)).copy()
    eye = np.eye(2)
    h0 = np.array([[epsilon, delta], [delta, -epsilon]])

    def both(R):
        V, dV = _spring(np.asarray(R, dtype=float), spring, center)
        return V[..., None, None] * eye + h0, dV[..., None, None] * eye

    gap = 2.0 * np.hypot(epsilon, delta)

    def pair_forces(R, a, b):
        return -spring * (R - center), gap * (a - b), np.full(R.shape[0], gap)

    return DiabaticModel(2, N, lambda R: both(R)[0], lambda R: both(R)[1], "two-level-constant",
                         dict(epsilon=epsilon, delta=delta, spring=spring), both, pair_forces)


def model_gallery(name: str, N: int, **params) -> DiabaticModel:
    builders = {"two-level-linear": two_level_linear, "two-level-constant": two_level_constant}
    if name not in builders:
        raise KeyError(f"unknown quantum model '{name}' (choose from {sorted(builders)})")
    return builders[name](N, **params)
