"""Linear response of constrained quantum-classical systems.

The response kernel is estimated from trajectories: initial points are
drawn from the canonical stationary density, the perturbation's bracket
action on that density is evaluated in closed form at each point, and the
probe observable is propagated with the constrained surface-hopping
propagator from every surface pair.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .constraints import ConstraintSet, tangent_projector
from .dirac import DiracEngine, MatrixPhaseFunction, b_dirac_batch, b_dirac_divergence, grad_log_det_z, matrix_bracket
from .errors import ConfigError, RunError
from .phase import FD_SCALE, PhasePoint, symplectic_matrix
from .propagator import EnsembleState, IntegratorConfig, _record_steps, map_chunks, run_chunk
from .quantum import DiabaticModel, adiabatic_arrays
from .rng import CounterRNG
from .statmech import StationaryDensity, StationarySamples, chain_mean_se, rho1_bracket, sample_stationary

TERMS = ("bracket", "measure", "kappa")


class CoarseGridWarning(UserWarning):
    """The force protocol changes faster than the response grid resolves."""


@dataclass(frozen=True)
class Perturbation:
    """H(t) = H0 - A F(t)."""

    A: MatrixPhaseFunction
    force_protocol: Callable[[float], float] = field(default=lambda t: 0.0)

    def coupling(self, X: PhasePoint, t: float) -> np.ndarray:
        return -self.A.evaluate(X) * self.force_protocol(t)


@dataclass(frozen=True)
class ResponseRequest:
    B: MatrixPhaseFunction
    times: Sequence[float]
    n_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size == 0 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ConfigError("response times must increase strictly from 0", "times")
        if self.n_samples < 2:
            raise ConfigError("need at least two samples for error bars", "n_samples")


# ------------------------------------------------------------ perturbation compressibility


def _as_batch(X):
    return np.asarray(X.R, dtype=float), np.asarray(X.P, dtype=float)


def kappa_A(engine: DiracEngine, A, X: PhasePoint, h=None):
    """-sum_ij dB^D_ij/dX_i dA/dX_j from the finite-difference divergence of B^D.

    Returns a float for scalar A and an n x n matrix for matrix A.
    """
    div = b_dirac_divergence(engine.cset, X.R, X.P, h)
    g = np.asarray(A.gradient(X))
    if g.ndim == 1:
        return float(-div @ g)
    return -np.einsum("j,jab->ab", div, g)


def kappa_A_closed_form(engine: DiracEngine, A, X: PhasePoint, form: str = "projected"):
    """Closed forms of the perturbation compressibility.

    ``printed``: -(d ln det Z/dR + sum Z_nm dZ^{-1}_nm/dR) . dA/dP.  The
    two gradient terms cancel identically, so this form is zero up to
    rounding.
    ``projected``: ((1 - Pi) d ln det Z/dR) . dA/dP, which equals the
    divergence form because B^D has no R divergence and
    sum_i dB^D_{i,P_k}/dX_i = -((1 - Pi) grad ln det Z)_k.
    """
    cset = engine.cset
    g = np.asarray(A.gradient(X))
    N = X.N
    gP = g[N:]
    if not cset.l:
        return 0.0 if g.ndim == 1 else np.zeros(g.shape[1:], dtype=g.dtype)
    gl = grad_log_det_z(cset, X.R)
    if form == "printed":
        A_ = cset.gradients(X.R)
        Hs = cset.hessians(X.R)
        Z = cset.z_matrix(X.R, A_)
        Zi = np.linalg.inv(Z)
        T = np.einsum("aik,i,bi->kab", Hs, cset.inv_masses, A_)
        dZ = T + np.swapaxes(T, -1, -2)
        dZi = -np.einsum("ab,kbc,cd->kad", Zi, dZ, Zi)
        vec = gl + np.einsum("ab,kab->k", Z, dZi)
        sign = -1.0
    elif form == "projected":
        vec = gl - tangent_projector(cset, X.R) @ gl
        sign = 1.0
    else:
        raise ValueError("form must be 'printed' or 'projected'")
    if g.ndim == 1:
        return float(sign * vec @ gP)
    return sign * np.einsum("k,kab->ab", vec, gP)


def _kappa_vector(cset, R):
    """v with kappa_A = v . dA/dP, batched: (1 - Pi) grad ln det Z."""
    if not cset.l:
        return np.zeros(np.shape(R))
    gl = grad_log_det_z(cset, R)
    Pi = tangent_projector(cset, R)
    return gl - np.einsum("...ij,...j->...i", Pi, gl)


# ------------------------------------------------------------ density and its derivatives


def _s0_parts(model, R, P, masses, beta, gap_floor):
    """Diabatic e^{-beta K} expm(-beta h) and its analytic gradient (K, 2N, n, n)."""
    E, U, d, _, ok = adiabatic_arrays(model, R, None, gap_floor)
    _, gh = model.evaluate(R)
    v = P / masses
    bk = np.exp(-beta * 0.5 * np.sum(P * v, axis=-1))
    f = np.exp(-beta * E)
    dE = E[..., :, None] - E[..., None, :]
    safe = np.where(np.abs(dE) > 0, dE, 1.0)
    # divided differences of exp(-beta E), diagonal -beta exp(-beta E)
    L = np.where(np.abs(dE) > 0, f[..., None, :] * np.expm1(-beta * dE) / safe, -beta * f[..., None, :])
    S = bk[:, None, None] * np.einsum("kab,kb,kcb->kac", U, f, U)
    G = np.einsum("kla,kilm,kmb->kiab", U, np.asarray(gh, dtype=float), U)
    dR = bk[:, None, None, None] * np.einsum("kac,kicd,kbd->kiab", U, L[:, None] * G, U)
    dP = -beta * v[:, :, None, None] * S[:, None]
    return S.astype(complex), np.concatenate([dR, dP], axis=1).astype(complex), E, U, ok


def _s1_diabatic(model, R, P, masses, beta, gap_floor):
    """Diabatic form of the order-hbar correction (without det Z)."""
    E, U, d, _, ok = adiabatic_arrays(model, R, None, gap_floor)
    v = P / masses
    H = 0.5 * np.sum(P * v, axis=-1)[:, None] + E
    vd = np.einsum("ki,kabi->kab", v, d)
    n = E.shape[-1]
    br = rho1_bracket(beta, E[:, :, None] - E[:, None, :]) * (1.0 - np.eye(n))
    s1 = -1j * vd * np.exp(-beta * H)[:, None, :] * br
    return np.einsum("kac,kcd,kbd->kab", U, s1, U), ok


def density_and_gradient(model, cset, R, P, beta, hbar, include_rho1=True, gap_floor=1e-10, h=None):
    """S = S0 + hbar S1 in the diabatic basis, its X-gradient, and the adiabatic frame.

    The full density is det Z * S * delta(xi) / Q; the delta factor drops out
    of every Dirac bracket and is not represented.
    """
    masses = cset.masses
    S, gS, E, U, ok = _s0_parts(model, R, P, masses, beta, gap_floor)
    if include_rho1:
        S1, ok1 = _s1_diabatic(model, R, P, masses, beta, gap_floor)
        S = S + hbar * S1
        ok = ok & ok1
        N = R.shape[-1]
        for i in range(2 * N):
            base = R if i < N else P
            k = i % N
            step = FD_SCALE * np.maximum(1.0, np.abs(base[..., k])) if h is None else np.full(base.shape[:-1], h)
            up, dn = base.copy(), base.copy()
            up[..., k] += step
            dn[..., k] -= step
            if i < N:
                fp, okp = _s1_diabatic(model, up, P, masses, beta, gap_floor)
                fm, okm = _s1_diabatic(model, dn, P, masses, beta, gap_floor)
            else:
                fp, okp = _s1_diabatic(model, R, up, masses, beta, gap_floor)
                fm, okm = _s1_diabatic(model, R, dn, masses, beta, gap_floor)
            ok = ok & okp & okm
            gS[:, i] += hbar * (fp - fm) / (up[..., k] - dn[..., k])[:, None, None]
    return S, gS, E, U, ok


def _anti(a, b):
    return a @ b + b @ a


def response_kernels(A: MatrixPhaseFunction, model: DiabaticModel, cset: ConstraintSet, R, P, beta: float,
                     hbar: float = 1.0, include_rho1: bool = True, constrained: bool = True, gap_floor=1e-10):
    """Per-point pieces of iL_A^D rho + 1/2 [kappa_A, rho]_+ (unnormalized rho = det Z S).

    Returns (terms, U, trace0, det_z, ok) where ``terms`` maps
    bracket/measure/kappa to diabatic (K, n, n) arrays:
      bracket = det Z (-(i/hbar)[A, S] + 1/2 ({A, S}_D - {S, A}_D))
      measure = 1/2 [{A, det Z}_D, S]_+
      kappa   = 1/2 det Z [kappa_A, S]_+
    ``constrained=False`` uses the canonical Poisson structure and drops
    det Z and kappa_A (the unconstrained reference path).
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    K, N = R.shape
    S, gS, E, U, ok = density_and_gradient(model, cset, R, P, beta, hbar, include_rho1, gap_floor)
    Am = A.evaluate_batch(R, P, cset.masses)
    gA = A.gradient_batch(R, P, cset.masses)
    if constrained and cset.l:
        BD = b_dirac_batch(cset, R, P)
        dz = np.linalg.det(cset.z_matrix(R))
        gdz = np.concatenate([dz[:, None] * grad_log_det_z(cset, R), np.zeros((K, N))], axis=1)
        kap = np.einsum("ki,kiab->kab", _kappa_vector(cset, R), gA[:, N:])
    else:
        BD = np.broadcast_to(symplectic_matrix(N), (K, 2 * N, 2 * N))
        dz = np.ones(K)
        gdz = np.zeros((K, 2 * N))
        kap = np.zeros_like(Am)
    comm = Am @ S - S @ Am
    bracket = dz[:, None, None] * (-1j / hbar * comm + 0.5 * (matrix_bracket(BD, gA, gS) - matrix_bracket(BD, gS, gA)))
    AdZ = np.einsum("kiab,kij,kj->kab", gA, BD, gdz)
    measure = 0.5 * _anti(AdZ, S)
    kappa = 0.5 * dz[:, None, None] * _anti(kap, S)
    herm = np.max(np.abs(kappa - np.conj(np.swapaxes(kappa, -1, -2))), initial=0.0)
    if herm > 1e-12 * max(1.0, float(np.max(np.abs(kappa), initial=0.0))):
        raise RunError(f"anticommutator term is not Hermitian (defect {herm:.3e})")
    trace0 = np.sum(np.exp(-beta * (0.5 * np.sum(P * P / cset.masses, axis=-1)[:, None] + E)), axis=-1)
    return dict(bracket=bracket, measure=measure, kappa=kappa), U, trace0, dz, ok


# ------------------------------------------------------------ response function


@dataclass
class ResponseResult:
    times: np.ndarray
    phi: np.ndarray                    # complex total
    stderr: np.ndarray                 # real part standard error
    terms: dict                        # name -> (mean, stderr) arrays
    n_samples: int
    n_excluded: int

    def rows(self):
        for k, t in enumerate(self.times):
            row = dict(time=float(t), phi=float(self.phi[k].real), phi_im=float(self.phi[k].imag),
                       se=float(self.stderr[k]))
            for name in TERMS:
                m, se = self.terms[name]
                row[name] = float(m[k].real)
                row[name + "_se"] = float(se[k])
            yield row


def response_phi(request: ResponseRequest, perturbation: Perturbation, sd: StationaryDensity,
                 model: DiabaticModel, cset: ConstraintSet, cfg: IntegratorConfig, hbar: float = 1.0,
                 threads: int = 1, samples: Optional[StationarySamples] = None, include_rho1: bool = True,
                 constrained: bool = True, hopping: bool = True, sampler_options: Optional[dict] = None) -> ResponseResult:
    """Phi_BA(t) = -Tr' int dX B(X, t) (iL_A^D rho + 1/2 [kappa_A^D, rho]_+), term by term.

    Each stationary sample launches one trajectory per surface pair
    (b, b'); the weighted element of B at time t estimates B^{bb'}(X, t),
    which is contracted with the kernel element (b', b).  Samples whose
    trajectories abort or are truncated are excluded and counted.
    """
    if sd.mode != "canonical":
        raise ConfigError("response_phi needs the canonical stationary density", "mode")
    if perturbation.A.n != model.n or request.B.n != model.n:
        raise ConfigError("A and B must match the quantum dimension of the model")
    times = np.asarray(request.times, dtype=float)
    steps = _record_steps(times, cfg.dt)
    if samples is None:
        samples = sample_stationary(sd, cset, model, request.n_samples, CounterRNG(request.seed),
                                    **(sampler_options or {}))
    R, P = samples.R, samples.P
    K = R.shape[0]
    n = model.n
    terms, U, trace0, dz, ok = response_kernels(perturbation.A, model, cset, R, P, sd.beta, hbar, include_rho1,
                                                constrained, cfg.gap_floor)
    # kernel elements in the adiabatic basis used by the propagator
    kad = {k: np.einsum("kia,kij,kjb->kab", U, v, U) for k, v in terms.items()}
    w = 1.0 / (dz * trace0)

    pairs = np.array([(b, bp) for b in range(n) for bp in range(n)], dtype=np.int64)
    npair = len(pairs)
    ens = EnsembleState(np.repeat(R, npair, axis=0), np.repeat(P, npair, axis=0), np.tile(pairs, (K, 1)),
                        np.ones(K * npair, dtype=complex), cset.masses,
                        np.arange(K * npair, dtype=np.uint64))
    rng = CounterRNG(request.seed)

    def work(chunk):
        return run_chunk(chunk, model, cset, cfg, request.B, steps, rng, hbar, hopping, constrained)

    results = map_chunks(work, ens, cfg.chunk_size, threads)
    vals = np.concatenate([r.values for r in results]).reshape(K, n, n, len(times))
    live = np.concatenate([r.alive & ~r.truncated for r in results]).reshape(K, npair).all(axis=1) & ok
    if not live.any():
        raise RunError("no usable response samples")
    out = {}
    total = np.zeros((K, len(times)), dtype=complex)
    for name in TERMS:
        # sum_{b b'} B^{b b'}(t) kernel_{b' b}
        c = -np.einsum("kbct,kcb->kt", vals, kad[name]) * w[:, None]
        c = np.where(live[:, None], c, 0.0)
        total += c
        out[name] = c
    chain = samples.chain[live]
    nch = samples.n_chains
    res_terms = {}
    for name in TERMS:
        m, se = chain_mean_se(out[name][live], chain, nch)
        res_terms[name] = (m, np.real(se))
    m, se = chain_mean_se(total[live], chain, nch)
    return ResponseResult(times, m, np.real(se), res_terms, int(live.sum()), int(K - live.sum()))


def convolve_response(times, phi, force_protocol, t: float, tol: float = 1e-2) -> float:
    """Estimate of int_0^t Phi(t - tau) F(tau) dtau on the grid of ``times``.

    A callable ``force_protocol`` is sampled on the grid and integrated with
    the trapezoid rule; it warns with :class:`CoarseGridWarning` when
    midpoint values deviate from linear interpolation by more than ``tol``
    of the protocol's range.  An array gives bin values: F[k] holds on
    [times[k], times[k+1]), and each bin integrates the linearly
    interpolated Phi exactly, so a single-bin impulse returns
    Phi(t) * width up to O(width^2).
    """
    times = np.asarray(times, dtype=float)
    phi = np.real(np.asarray(phi))
    if t < 0 or t > times[-1] + 1e-12:
        raise ValueError("t must lie within the response grid")
    tau = times[times <= t + 1e-12]
    if tau.size < 2:
        return 0.0
    if callable(force_protocol):
        F = np.array([force_protocol(x) for x in tau], dtype=float)
        mid = np.array([force_protocol(x) for x in 0.5 * (tau[1:] + tau[:-1])], dtype=float)
        scale = max(float(np.max(np.abs(F), initial=0.0)), float(np.max(np.abs(mid), initial=0.0)))
        if scale > 0 and np.max(np.abs(mid - 0.5 * (F[1:] + F[:-1]))) > tol * scale:
            warnings.warn("force protocol varies faster than the response grid spacing", CoarseGridWarning)
        lag = np.interp(t - tau, times, phi)
        return float(np.trapezoid(lag * F, tau))
    F = np.asarray(force_protocol, dtype=float)
    if F.shape[0] < tau.size - 1:
        raise ValueError("force values must cover every bin up to t")
    lag = np.interp(t - tau, times, phi)
    return float(np.sum(F[: tau.size - 1] * np.diff(tau) * 0.5 * (lag[1:] + lag[:-1])))
