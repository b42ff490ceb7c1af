"""Stationary density of the constrained quantum-classical dynamics to first order in hbar.

Densities are handled as a smooth part times delta(xi).  Samplers and
Monte Carlo estimators work with the smooth part on the constraint
manifold; the softened delta(xi) appears only in the pointwise recursion
diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .constraints import ConstraintSet, project_momenta, project_positions, tangent_projector
from .dirac import DiracEngine, b_dirac_batch, b_dirac_divergence
from .errors import ConfigError, DegeneracyError
from .phase import FD_SCALE, PhasePoint
from .propagator import EnsembleState, TrajectoryState
from .quantum import FREQUENCY_MODES, GAP_FLOOR, AdiabaticFrame, DiabaticModel, adiabatic_arrays, adiabatic_forces
from .rng import CounterRNG

MODES = ("canonical", "microcanonical-delta")
SERIES_CUTOFF = 1e-3

# counter purposes used by the sampler
_PROPOSAL, _ACCEPT, _SURFACE, _MOMENTUM = 2, 3, 4, 5


@dataclass(frozen=True)
class StationaryDensity:
    """Parameters of the order-hbar^0 ansatz.

    ``xi_width`` and ``shell_width`` are the Gaussian widths used when a
    delta function has to be evaluated pointwise.
    """

    mode: str = "canonical"
    beta: float = 1.0
    energy_shell: Optional[float] = None
    Q: float = 1.0
    xi_width: float = 1e-3
    shell_width: float = 1e-2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown density mode '{self.mode}' (choose from {MODES})", "mode")
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise ConfigError("beta must be positive and finite", "beta")
        if not (self.Q > 0 and np.isfinite(self.Q)):
            raise ConfigError("normalization Q must be positive and finite", "Q")
        if not (self.xi_width > 0 and self.shell_width > 0):
            raise ConfigError("delta widths must be positive", "xi_width")
        if self.mode == "microcanonical-delta" and self.energy_shell is None:
            raise ConfigError("microcanonical mode needs an energy_shell value", "energy_shell")


def _gauss(x, w):
    return np.exp(-0.5 * (x / w) ** 2) / (np.sqrt(2 * np.pi) * w)


def delta_xi(sd: StationaryDensity, cset: ConstraintSet, R, P):
    """Softened prod delta(sigma) delta(sigma_dot); 1 when unconstrained."""
    if not cset.l:
        return np.ones(np.shape(R)[:-1])
    g = _gauss(cset.sigma(R), sd.xi_width) * _gauss(cset.sigma_dot(R, P), sd.xi_width)
    return np.prod(g, axis=-1)


def det_z(cset: ConstraintSet, R):
    if not cset.l:
        return np.ones(np.shape(R)[:-1])
    return np.linalg.det(cset.z_matrix(R))


def _smooth0(sd, H, dz):
    """Smooth part of rho0 for adiabatic energies H (..., n)."""
    if sd.mode == "canonical":
        return dz[..., None] * np.exp(-sd.beta * H) / sd.Q
    return dz[..., None] * _gauss(sd.energy_shell - H, sd.shell_width) / sd.Q


def rho0(sd: StationaryDensity, X: PhasePoint, alpha: int, frame: AdiabaticFrame, engine: DiracEngine,
         beta_idx: Optional[int] = None) -> float:
    """Order-hbar^0 density element (alpha, beta_idx); diagonal in the adiabatic basis."""
    if beta_idx is not None and beta_idx != alpha:
        return 0.0
    H = X.kinetic_energy + frame.E
    s = _smooth0(sd, H, det_z(engine.cset, X.R))
    return float(s[alpha] * delta_xi(sd, engine.cset, X.R, X.P))


def rho1_bracket(beta: float, dE):
    """(1 - e^{-beta dE}) / (-dE) + (beta/2)(1 + e^{-beta dE}) with dE = E_a - E_b.

    Near dE = 0 the two terms cancel; the series
    beta (x^2/12 - x^3/24 + x^4/80), x = beta dE, is used there.
    """
    dE = np.asarray(dE, dtype=float)
    x = beta * dE
    small = np.abs(x) < SERIES_CUTOFF
    xs = np.where(small, 1.0, x)
    em = np.expm1(-xs)  # e^{-x} - 1
    direct = beta * (em / xs + 0.5 * (2.0 + em))
    series = beta * x * x * (1.0 / 12 - x / 24 + x * x / 80)
    out = np.where(small, series, direct)
    return float(out) if out.ndim == 0 else out


def rho1(sd: StationaryDensity, X: PhasePoint, alpha: int, beta_idx: int, frame: AdiabaticFrame,
         engine: Optional[DiracEngine] = None) -> complex:
    """Order-hbar density element -i (P/M . d_ab) rho0^b [bracket]."""
    if alpha == beta_idx:
        return 0j
    cset = engine.cset if engine is not None else ConstraintSet([], X.masses)
    r0 = rho0(sd, X, beta_idx, frame, DiracEngine(cset))
    vd = float(X.velocity @ frame.d[alpha, beta_idx])
    return -1j * vd * r0 * rho1_bracket(sd.beta, frame.E[alpha] - frame.E[beta_idx])


# ------------------------------------------------------------ density expansion on phase space


class DensityExpansion:
    """rho^(0) and rho^(1) as matrix functions of X in the adiabatic basis.

    Matrix elements depend on the eigenvector gauge; every evaluation is
    aligned to a reference eigenvector matrix ``U_ref``.
    """

    def __init__(self, sd: StationaryDensity, model: DiabaticModel, cset: ConstraintSet,
                 frequency_mode: str = "projected", gap_floor: float = GAP_FLOOR, synthetic_coupling: float = 0.3):
        if frequency_mode not in FREQUENCY_MODES:
            raise ValueError(f"unknown frequency mode '{frequency_mode}'")
        self.sd = sd
        self.model = model
        self.cset = cset
        self.mode = frequency_mode
        self.gap_floor = gap_floor
        self.synthetic_coupling = synthetic_coupling

    def frame(self, R, U_ref=None):
        E, U, d, Fad, ok = adiabatic_arrays(self.model, np.asarray(R)[None], None if U_ref is None else U_ref[None],
                                            self.gap_floor)
        if not ok[0]:
            raise DegeneracyError("adiabatic gap below floor")
        return E[0], U[0], d[0], Fad[0]

    def smooth(self, R, P, order: int, U_ref=None) -> np.ndarray:
        """Smooth part (delta(xi) removed) of rho^(order); order 's' gives the synthetic test density."""
        R = np.asarray(R, dtype=float)
        P = np.asarray(P, dtype=float)
        E, U, d, _ = self.frame(R, U_ref)
        minv = self.cset.inv_masses
        H = 0.5 * np.sum(P * P * minv) + E
        r0 = _smooth0(self.sd, H, det_z(self.cset, R))
        n = E.size
        if order == 0:
            return np.diag(r0).astype(complex)
        if order == "s":
            off = 1.0 - np.eye(n)
            return self.synthetic_coupling * off * 0.5 * (r0[:, None] + r0[None, :]) + 0j
        if order != 1:
            raise ValueError("closed-form densities exist for orders 0 and 1 only")
        vd = np.einsum("i,abi->ab", P * minv, d)
        br = rho1_bracket(self.sd.beta, E[:, None] - E[None, :])
        out = -1j * vd * r0[None, :] * br
        np.fill_diagonal(out, 0.0)
        return out

    def full(self, R, P, order, U_ref=None) -> np.ndarray:
        return self.smooth(R, P, order, U_ref) * float(delta_xi(self.sd, self.cset, R, P))

    def gradient(self, R, P, order, U_ref, part="full", h=None):
        """Central-difference derivatives (2N, n, n) of the chosen part."""
        f = self.full if part == "full" else self.smooth
        x = np.concatenate([R, P])
        N = R.size
        steps = FD_SCALE * np.maximum(1.0, np.abs(x)) if h is None else np.full(x.size, h)
        out = []
        for i in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[i] += steps[i]
            xm[i] -= steps[i]
            fp = f(xp[:N], xp[N:], order, U_ref)
            fm = f(xm[:N], xm[N:], order, U_ref)
            out.append((fp - fm) / (xp[i] - xm[i]))
        return np.array(out)

    def jump_directions(self, R, d):
        """j_ab with S.d/dP = (E_a - E_b) j_ab . d/dP for each pair, shape (n, n, N)."""
        if not self.cset.l or self.mode == "literal":
            return d * (1 + (self.cset.l if self.mode == "literal" else 0))
        Pd = np.einsum("...ij,...abj->...abi", tangent_projector(self.cset, R), d)
        return d + Pd if self.mode == "projected" else d - Pd


def j_action(rho, dP_rho, v, d, E, jdir):
    """(J^D rho)_{a a'} = sum_{b b'} J_{a a', b b'} rho_{b b'} in differential form.

    J rho = -sum_b [v.d_ab rho_ba' + (E_a - E_b)/2 j_ab . dP rho_ba']
            -sum_b' [v.d_a'b' rho_ab' + (E_a' - E_b')/2 j_a'b' . dP rho_ab']
    Shapes: rho (..., n, n); dP_rho (..., N, n, n); v (..., N); d, jdir (..., n, n, N).
    """
    vd = np.einsum("...i,...abi->...ab", v, d)
    dE = E[..., :, None] - E[..., None, :]
    first = vd @ rho + 0.5 * np.einsum("...ab,...abi,...ibc->...ac", dE, jdir, dP_rho)
    # second index: sum_b' v.d_{a'b'} rho_{ab'} = (rho vd^T)_{aa'}
    second = rho @ np.swapaxes(vd, -1, -2) + 0.5 * np.einsum("...cb,...cbi,...iab->...ac", dE, jdir, dP_rho)
    return -(first + second)


def recursion_residual(exp: DensityExpansion, X: PhasePoint, order: int = 1, h=None) -> np.ndarray:
    """Left minus right side of the order-(n+1) stationarity equation, n = order - 1.

    order 0: i E_{aa'} rho0_{aa'} (vanishes for a diagonal rho0).
    order 1: i E_{aa'} rho1 + (iL^D_{aa'} + kappa0) rho0 - sum J^D rho0, where
    iL^D_{aa'} f = grad f . B^D . grad Hbar_{aa'} and Hbar is the mean of
    H_a and H_a'.  Derivatives of rho0 are central differences.
    """
    R, P = X.R, X.P
    E, U, d, Fad = exp.frame(R)
    rho_0 = exp.full(R, P, 0, U)
    dE = E[:, None] - E[None, :]
    if order == 0:
        return 1j * dE * rho_0
    if order != 1:
        raise ValueError("recursion residual is implemented for orders 0 and 1")
    cset = exp.cset
    N = R.size
    v = P * cset.inv_masses
    rho_1 = exp.full(R, P, 1, U)
    g = exp.gradient(R, P, 0, U, "full", h)  # (2N, n, n)
    BD = b_dirac_batch(cset, R, P)
    div = b_dirac_divergence(cset, R, P)
    n = E.size
    res = 1j * dE * rho_1
    for a in range(n):
        for b in range(n):
            gH = np.concatenate([-0.5 * (Fad[a] + Fad[b]), v])
            res[a, b] += g[:, a, b] @ BD @ gH + (div @ gH) * rho_0[a, b]
    jdir = exp.jump_directions(R, d)
    res -= j_action(rho_0, g[N:], v, d, E, jdir)
    return res


@dataclass
class ResidualScan:
    max_residual: float
    scale: float
    n_points: int
    n_excluded: int


def residual_scan(exp: DensityExpansion, points: Sequence[PhasePoint], order: int = 1) -> ResidualScan:
    """Max |residual| over points; points where FD evaluation breaks down are excluded and counted."""
    worst, scale, bad = 0.0, 0.0, 0
    for X in points:
        try:
            r = recursion_residual(exp, X, order)
        except (DegeneracyError, FloatingPointError, ArithmeticError):
            bad += 1
            continue
        if not np.all(np.isfinite(r)):
            bad += 1
            continue
        worst = max(worst, float(np.max(np.abs(r))))
        scale = max(scale, float(np.max(np.abs(exp.full(X.R, X.P, 0)))))
    return ResidualScan(worst, scale, len(points) - bad, bad)


# ------------------------------------------------------------ manifold sampler


@dataclass
class StationarySamples:
    R: np.ndarray
    P: np.ndarray
    alpha: np.ndarray
    weights: np.ndarray
    chain: np.ndarray
    masses: np.ndarray
    acceptance: float
    n_projection_failures: int
    n_chains: int

    def __len__(self):
        return self.R.shape[0]

    def __iter__(self):
        for k in range(len(self)):
            X = PhasePoint(self.R[k], self.P[k], self.masses)
            a = int(self.alpha[k])
            yield TrajectoryState(X, (a, a), 1.0 + 0j, 0.0, k), float(self.weights[k])

    def to_ensemble(self) -> EnsembleState:
        pairs = np.stack([self.alpha, self.alpha], axis=1)
        return EnsembleState(self.R, self.P, pairs, self.weights.astype(complex), self.masses)

    def mean_se(self, values):
        """Mean and standard error from per-chain means (values shape (K,) or (K, T))."""
        return chain_mean_se(values, self.chain, self.n_chains)


def chain_mean_se(values, chain, n_chains):
    values = np.asarray(values)
    sums = np.zeros((n_chains,) + values.shape[1:], dtype=values.dtype)
    np.add.at(sums, chain, values)
    counts = np.bincount(chain, minlength=n_chains).astype(float)
    use = counts > 0
    means = sums[use] / counts[use].reshape((-1,) + (1,) * (values.ndim - 1))
    m = values.mean(axis=0)
    k = int(use.sum())
    if k < 2:
        return m, np.full(np.shape(m), np.nan)
    se_re = np.std(means.real, axis=0, ddof=1) / np.sqrt(k)
    if np.iscomplexobj(values):
        return m, se_re + 1j * np.std(means.imag, axis=0, ddof=1) / np.sqrt(k)
    return m, se_re


def _tangent_basis(A, N):
    """Orthonormal basis of the null space of A (..., l, N): shape (..., N, N - l)."""
    l = A.shape[-2]
    if not l:
        return np.broadcast_to(np.eye(N), A.shape[:-2] + (N, N))
    Q, _ = np.linalg.qr(np.swapaxes(A, -1, -2), mode="complete")
    return Q[..., l:]


def _log_target(cset, model, beta, R):
    """log of sqrt(det Z / det A A^T) sum_a exp(-beta E_a) on the manifold."""
    E, _, _ = adiabatic_forces(model, R)
    x = -beta * E
    m = x.max(axis=-1)
    lse = m + np.log(np.exp(x - m[..., None]).sum(axis=-1))
    if not cset.l:
        return lse
    A = cset.gradients(R)
    _, ldz = np.linalg.slogdet(cset.z_matrix(R, A))
    _, ldg = np.linalg.slogdet(A @ np.swapaxes(A, -1, -2))
    return lse + 0.5 * (ldz - ldg)


def sample_stationary(sd: StationaryDensity, cset: ConstraintSet, model: DiabaticModel, count: int,
                      rng, chains: int = 64, burn_in: int = 200, thin: int = 5, step: float = 0.5,
                      start=None) -> StationarySamples:
    """Markov-chain samples of (R, P, alpha) from det Z exp(-beta H0^alpha) delta(xi).

    Positions: random-walk Metropolis on {sigma = 0} with Gaussian tangent
    proposals, Newton projection along the constraint gradients and a
    reversibility check.  The position marginal carries the factor
    sqrt(det Z / det A A^T) that remains after integrating momenta and the
    delta functions.  Momenta are drawn from N(0, M/beta) and projected onto
    {sigma_dot = 0}; the surface is drawn from exp(-beta E_a).
    """
    if sd.mode != "canonical":
        raise ConfigError("stationary sampling is available in canonical mode only", "mode")
    if count < 1 or chains < 1 or thin < 1 or burn_in < 0:
        raise ConfigError("count, chains and thin must be positive; burn_in non-negative")
    rng = rng if isinstance(rng, CounterRNG) else CounterRNG(int(rng))
    N = cset.N
    l = cset.l
    beta = sd.beta
    ids = np.arange(chains, dtype=np.uint64)
    x0 = cset.reference_point() if start is None else np.asarray(start, dtype=float)
    x = np.tile(x0, (chains, 1))
    if l:
        x, ok = project_positions(cset, x)
        if not np.all(ok):
            raise ConfigError("could not place the starting configuration on the constraint manifold")
    logf = _log_target(cset, model, beta, x)
    per_chain = -(-count // chains)
    n_iter = burn_in + per_chain * thin
    Rs, Ps, As, Cs = [], [], [], []
    accepted = tried = failures = 0
    minv = cset.inv_masses
    for it in range(1, n_iter + 1):
        A = cset.gradients(x)
        T = _tangent_basis(A, N)
        v = step * rng.normals(ids, it, _PROPOSAL, N - l)
        y = x + np.einsum("cij,cj->ci", T, v)
        if l:
            y, ok = project_positions(cset, y, A)
            Ay = cset.gradients(y)
            Ty = _tangent_basis(Ay, N)
            v_rev = np.einsum("cij,ci->cj", Ty, x - y)
            xr, okr = project_positions(cset, y + np.einsum("cij,cj->ci", Ty, v_rev), Ay)
            okr &= np.max(np.abs(xr - x), axis=-1) < 1e-8
            failures += int(np.sum(~ok))
            ok &= okr
        else:
            ok = np.ones(chains, dtype=bool)
            v_rev = -v
        with np.errstate(invalid="ignore", over="ignore"):
            logf_y = np.where(ok, _log_target(cset, model, beta, np.where(ok[:, None], y, x)), -np.inf)
        log_acc = logf_y - logf - (np.sum(v_rev**2, axis=-1) - np.sum(v**2, axis=-1)) / (2 * step**2)
        u = rng.uniform(ids, it, _ACCEPT)[:, 0]
        acc = ok & (np.log(u) < log_acc)
        x = np.where(acc[:, None], y, x)
        logf = np.where(acc, logf_y, logf)
        accepted += int(acc.sum())
        tried += chains
        if it > burn_in and (it - burn_in) % thin == 0:
            E, _, _ = adiabatic_forces(model, x)
            w = np.exp(-beta * (E - E.min(axis=-1, keepdims=True)))
            cdf = np.cumsum(w, axis=-1) / w.sum(axis=-1, keepdims=True)
            us = rng.uniform(ids, it, _SURFACE)[:, 0]
            alpha = np.minimum(np.sum(cdf <= us[:, None], axis=-1), model.n - 1)
            z = rng.normals(ids, it, _MOMENTUM, N)
            P = project_momenta(cset, x, z * np.sqrt(cset.masses / beta))
            Rs.append(x.copy())
            Ps.append(P)
            As.append(alpha)
            Cs.append(np.arange(chains))
    R = np.concatenate(Rs)[:count]
    P = np.concatenate(Ps)[:count]
    return StationarySamples(R, P, np.concatenate(As)[:count].astype(np.int64), np.ones(count),
                             np.concatenate(Cs)[:count], cset.masses, accepted / max(tried, 1), failures, chains)


# ------------------------------------------------------------ Fredholm condition


@dataclass
class FredholmEstimate:
    name: str
    estimate: float
    stderr: float

    @property
    def z_score(self) -> float:
        if self.stderr > 0:
            return abs(self.estimate) / self.stderr
        return 0.0 if self.estimate == 0 else np.inf


def fredholm_integrand(exp: DensityExpansion, R, P, alpha: int, order=1) -> float:
    """sum_{b > b'} 2 Re(J^D_{aa, bb'} rho_{bb'}) divided by the sampling weight det Z exp(-beta H_a).

    Uses the smooth part of the density; ``order`` 1 is the order-hbar
    density, 's' the synthetic real P-even test density.
    """
    E, U, d, _ = exp.frame(R)
    rho = exp.smooth(R, P, order, U)
    np.fill_diagonal(rho, 0.0)
    g = exp.gradient(R, P, order, U, "smooth")
    N = R.size
    v = P * exp.cset.inv_masses
    J = j_action(rho, g[N:], v, d, E, exp.jump_directions(R, d))
    H = 0.5 * np.sum(P * v) + E[alpha]
    w = _smooth0(exp.sd, np.array([H]), det_z(exp.cset, R)[None])[0, 0] * exp.sd.Q
    return float(np.real(J[alpha, alpha]) * exp.sd.Q / w)


def fredholm_integrand_batch(exp: DensityExpansion, R, P, alpha, order=1) -> np.ndarray:
    """Vectorized ``fredholm_integrand`` for canonical mode, with analytic momentum derivatives."""
    if exp.sd.mode != "canonical":
        raise ConfigError("the batched Fredholm integrand needs canonical mode", "mode")
    R = np.asarray(R, dtype=float)
    P = np.asarray(P, dtype=float)
    alpha = np.asarray(alpha)
    K = R.shape[0]
    E, U, d, _, ok = adiabatic_arrays(exp.model, R, None, exp.gap_floor)
    if not np.all(ok):
        raise DegeneracyError("adiabatic gap below floor in Fredholm sample")
    n = E.shape[-1]
    v = P * exp.cset.inv_masses
    beta = exp.sd.beta
    H = 0.5 * np.sum(P * v, axis=-1)[:, None] + E
    Ha = H[np.arange(K), alpha]
    # everything is linear in the Boltzmann factors, so scale by exp(-beta H_a)
    r0 = np.exp(-beta * (H - Ha[:, None]))
    off = 1.0 - np.eye(n)
    if order == 1:
        vd = np.einsum("ki,kabi->kab", v, d)
        br = rho1_bracket(beta, E[:, :, None] - E[:, None, :]) * off
        core = r0[:, None, :] * br
        rho = -1j * vd * core
        dP = -1j * (np.einsum("kabi,i->kiab", d, exp.cset.inv_masses) - beta * v[:, :, None, None] * vd[:, None]) * core[:, None]
    elif order == "s":
        rho = (exp.synthetic_coupling * off * 0.5 * (r0[:, :, None] + r0[:, None, :])).astype(complex)
        dP = -beta * v[:, :, None, None] * rho[:, None]
    else:
        raise ValueError("order must be 1 or 's'")
    J = j_action(rho, dP, v, d, E, exp.jump_directions(R, d))
    return np.real(J[np.arange(K), alpha, alpha])


def fredholm_check(exp: DensityExpansion, samples: StationarySamples, order=1,
                   test_functions: Optional[dict] = None) -> list:
    """Monte Carlo estimates of int dM sum 2Re(J^D rho) f(H0^a) for f in {1, H, H^2}.

    Estimates are in units of the sampler's normalization.
    """
    if test_functions is None:
        test_functions = {"1": lambda H: np.ones_like(H), "H": lambda H: H, "H^2": lambda H: H * H}
    K = len(samples)
    vals = np.empty(K)
    Hs = np.empty(K)
    for lo in range(0, K, 4096):
        sl = slice(lo, min(K, lo + 4096))
        R, P, a = samples.R[sl], samples.P[sl], samples.alpha[sl]
        if exp.sd.mode == "canonical":
            vals[sl] = fredholm_integrand_batch(exp, R, P, a, order)
        else:
            vals[sl] = [fredholm_integrand(exp, R[k], P[k], int(a[k]), order) for k in range(R.shape[0])]
        E, _, _ = adiabatic_forces(exp.model, R)
        Hs[sl] = 0.5 * np.sum(P * P * exp.cset.inv_masses, axis=-1) + E[np.arange(E.shape[0]), a]
    # Momenta and surface are redrawn at every recorded sample, so under the
    # null hypothesis (integrand odd in P) distinct terms are uncorrelated and
    # the plain standard error applies even along a Markov chain.
    out = []
    for name, f in test_functions.items():
        y = vals * f(Hs)
        se = float(np.std(y, ddof=1) / np.sqrt(K)) if K > 1 else np.nan
        out.append(FredholmEstimate(name, float(np.mean(y)), se))
    return out


def parity_defect(exp: DensityExpansion, R, P, alpha: int, order="s") -> float:
    """|I(R, P) + I(R, -P)| for the Fredholm integrand I; zero for an odd integrand."""
    return abs(fredholm_integrand(exp, R, P, alpha, order) + fredholm_integrand(exp, R, -P, alpha, order))
