"""Constrained classical flow, adiabatic segments, momentum jumps and hopping ensembles.

The ensemble path is vectorized over a chunk of trajectories.  Every random
draw is addressed by (trajectory stream, step), so a chunk's result does not
depend on which worker ran it, and chunk results are reduced in a fixed
pairwise order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .constraints import ConstraintSet, _check_z, multipliers, project_momenta, project_positions, tangent_projector
from .dirac import MatrixPhaseFunction
from .errors import DegenerateConstraintError, DegeneracyError, FrustratedHop, RunError, StepRejected
from .phase import PhasePoint
from .quantum import FREQUENCY_MODES, GAP_FLOOR, AdiabaticFrame, DiabaticModel, adiabatic_arrays, pair_mean_forces
from .rng import CounterRNG, Stream

HOP_PURPOSE = 1
SCHEMES = ("rk4", "velocity-verlet-projected")


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    scheme: str = "rk4"
    constraint_tol: float = 1e-8
    max_hops: int = 50
    frequency_mode: str = "projected"
    project_after_jump: bool = False
    gap_floor: float = GAP_FLOOR
    chunk_size: int = 256

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.constraint_tol > 0:
            raise ValueError("constraint_tol must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme '{self.scheme}' (choose from {SCHEMES})")
        if self.frequency_mode not in FREQUENCY_MODES:
            raise ValueError(f"unknown frequency mode '{self.frequency_mode}'")
        if self.max_hops < 0 or self.chunk_size < 1:
            raise ValueError("max_hops must be >= 0 and chunk_size >= 1")


@dataclass(frozen=True)
class TrajectoryState:
    X: PhasePoint
    pair: tuple
    weight: complex = 1.0 + 0j
    time: float = 0.0
    rng_stream: int = 0
    hops: int = 0
    U: Optional[np.ndarray] = None
    max_violation: float = 0.0      # worst |sigma| or |sigma_dot| seen so far


def _drift(cset, R, P):
    if not cset.l:
        z = np.zeros(np.shape(R)[:-1])
        return z, z
    return np.max(np.abs(cset.sigma(R)), axis=-1), np.max(np.abs(cset.sigma_dot(R, P)), axis=-1)


# ------------------------------------------------------------ integrators


def _rk4(rhs, R, P, dt):
    """One RK4 step of (R, P, theta); rhs returns (dR, dP, dtheta)."""
    k1 = rhs(R, P)
    k2 = rhs(R + 0.5 * dt * k1[0], P + 0.5 * dt * k1[1])
    k3 = rhs(R + 0.5 * dt * k2[0], P + 0.5 * dt * k2[1])
    k4 = rhs(R + dt * k3[0], P + dt * k3[1])
    R1 = R + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    P1 = P + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    th = dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return R1, P1, th


def _rattle(force, cset, R, P, dt):
    """Velocity Verlet with position (SHAKE) and momentum (RATTLE) projections.

    ``force`` returns (F, theta_rate).  Returns (R, P, theta, converged).
    """
    minv = cset.inv_masses
    F0, w0 = force(R)
    Ph = P + 0.5 * dt * F0
    Rt = R + dt * Ph * minv
    if cset.l:
        D = cset.gradients(R) * minv
        Rn, ok = project_positions(cset, Rt, D)
        Ph = Ph + (Rn - Rt) / (dt * minv)
    else:
        Rn, ok = Rt, np.ones(R.shape[:-1], dtype=bool)
    F1, w1 = force(Rn)
    Pn = project_momenta(cset, Rn, Ph + 0.5 * dt * F1)
    return Rn, Pn, 0.5 * dt * (w0 + w1), ok


def _classical_rhs(cset, force, constrained=True):
    minv = cset.inv_masses

    def rhs(R, P):
        F = np.asarray(force(R), dtype=float)
        if constrained:
            F = constrained_force(cset, R, P, F)
        return P * minv, F, np.zeros(R.shape[:-1])

    return rhs


def constrained_classical_step(X: PhasePoint, cset: ConstraintSet, force: Callable, cfg: IntegratorConfig) -> PhasePoint:
    """Advance R' = P/M, P' = F - sum lambda grad sigma by one step of ``cfg.dt``."""
    if cfg.scheme == "rk4":
        R, P, _ = _rk4(_classical_rhs(cset, force), X.R, X.P, cfg.dt)
    else:
        R, P, _, _ = _rattle(lambda r: (np.asarray(force(r), dtype=float), 0.0), cset, X.R, X.P, cfg.dt)
    s, sd = _drift(cset, R, P)
    bound = 10 * cfg.constraint_tol
    if s > bound or sd > bound:
        raise StepRejected(f"constraint drift |sigma|={float(s):.2e}, |sigma_dot|={float(sd):.2e} exceeds "
                           f"{bound:.1e}; reduce dt (now {cfg.dt})")
    return PhasePoint(R, P, X.masses)


# ------------------------------------------------------------ mean-surface forces


def mean_surface_forces(model, R, pairs, gap_floor=GAP_FLOOR):
    """Mean Hellmann-Feynman force and energy gap E_a - E_a' for each pair.

    R has shape (K, N) and pairs (K, 2).
    """
    return pair_mean_forces(model, R, pairs, gap_floor)


def constrained_force(cset, R, P, F, strict=True):
    """F - sum_a lambda_a grad sigma_a with the exact multipliers (batched).

    With ``strict=False`` rows with a degenerate Z get NaN forces instead of
    raising, so a batch caller can retire them individually.
    """
    if not cset.l:
        return F
    if cset.l > 1:
        A = cset.gradients(R)
        if strict or R.ndim == 1:
            lam = multipliers(cset, R, P, F, A)
        else:
            Z = cset.z_matrix(R, A)
            good = np.array([_healthy(z) for z in Z])
            lam = np.full(R.shape[:-1] + (cset.l,), np.nan)
            if good.any():
                lam[good] = multipliers(cset, R[good], P[good], F[good], A[good])
        return F - np.einsum("...a,...ai->...i", lam, A)
    # single constraint: scalar Z, no solve
    c = cset.constraints[0]
    minv = cset.inv_masses
    A = c.grad(R)
    v = P * minv
    Am = A * minv
    Z = (A * Am).sum(-1)
    if not ((Z > 0).all() and (Z < np.inf).all()):
        if strict:
            _check_z(Z[..., None, None])
        Z = np.where((Z > 0) & (Z < np.inf), Z, np.nan)
    num = np.einsum("...i,...ij,...j->...", v, c.hess(R), v) + (Am * F).sum(-1)
    return F - (num / Z)[..., None] * A


def _healthy(Z):
    try:
        _check_z(Z)
    except DegenerateConstraintError:
        return False
    return True


def pair_multipliers(cset, model, R, P, pairs, gap_floor=GAP_FLOOR):
    """lambda^{aa'}: exact multipliers built from the mean force of the pair."""
    F, _, _ = mean_surface_forces(model, R, pairs, gap_floor)
    return multipliers(cset, R, P, F)


def _segment_step(model, cset, cfg, R, P, pairs, hbar, constrained=True, strict=True):
    """One step on the mean surface of each pair; returns (R, P, dtheta, ok)."""
    minv = cset.inv_masses
    gap_ok = np.ones(R.shape[:-1], dtype=bool)

    def forces(r, p=None):
        F, dE, ok = mean_surface_forces(model, r, pairs, cfg.gap_floor)
        gap_ok[...] &= ok
        return F, dE / hbar

    if cfg.scheme == "rk4":
        def rhs(r, p):
            F, w = forces(r)
            if constrained:
                F = constrained_force(cset, r, p, F, strict)
            return p * minv, F, w

        with np.errstate(invalid="ignore", over="ignore"):
            R1, P1, th = _rk4(rhs, R, P, cfg.dt)
        ok = np.all(np.isfinite(R1), axis=-1) & np.all(np.isfinite(P1), axis=-1) & np.isfinite(th)
    else:
        R1, P1, th, ok = _rattle(forces, cset if constrained else _free(cset), R, P, cfg.dt)
    return R1, P1, th, ok & gap_ok


def _free(cset):
    return ConstraintSet([], cset.masses)


def adiabatic_segment(state: TrajectoryState, model: DiabaticModel, cset: ConstraintSet, cfg: IntegratorConfig,
                      duration: float, hbar: float = 1.0) -> TrajectoryState:
    """Evolve on the mean surface of ``state.pair`` and accumulate exp(i int omega dt)."""
    n_steps = int(round(duration / cfg.dt))
    if n_steps < 0 or abs(n_steps * cfg.dt - duration) > 1e-9 * max(1.0, abs(duration)):
        raise ValueError("duration must be a non-negative multiple of dt")
    R = state.X.R[None, :].copy()
    P = state.X.P[None, :].copy()
    pairs = np.array([state.pair], dtype=np.int64)
    theta = 0.0
    worst = state.max_violation
    bound = 10 * cfg.constraint_tol
    for _ in range(n_steps):
        R, P, th, ok = _segment_step(model, cset, cfg, R, P, pairs, hbar)
        if not ok[0]:
            raise DegeneracyError("adiabatic gap closed or projection failed during segment", tuple(state.pair))
        theta += float(th[0])
        s, sd = _drift(cset, R, P)
        worst = max(worst, float(s[0]), float(sd[0]))
        if s[0] > bound or sd[0] > bound:
            raise StepRejected(f"constraint drift {max(s[0], sd[0]):.2e} exceeds {bound:.1e}; reduce dt")
    _, U, _, _, _ = adiabatic_arrays(model, R, None if state.U is None else state.U[None], cfg.gap_floor)
    return replace(state, X=PhasePoint(R[0], P[0], state.X.masses), weight=state.weight * np.exp(1j * theta),
                   time=state.time + n_steps * cfg.dt, U=U[0], max_violation=worst)


# ------------------------------------------------------------ momentum jumps


def momentum_jump(X: PhasePoint, d_hat, hbar_M_omegaD: float) -> PhasePoint:
    """Shift P along the unit vector d_hat so (P'.d)^2 - (P.d)^2 = hbar M omega^D."""
    d_hat = np.asarray(d_hat, dtype=float)
    p = float(X.P @ d_hat)
    disc = p * p + hbar_M_omegaD
    if disc < 0:
        raise FrustratedHop(f"(P.d)^2 + hbar M omega = {disc:.3e} < 0", disc)
    s = 1.0 if p >= 0 else -1.0
    dp = s * np.sqrt(disc) - p
    return X.replace(P=X.P + dp * d_hat)


def jump_vectors(cset, R, d, omega, mode, constrained=True):
    """Jump direction vector u (before normalization) for each trajectory."""
    w = omega[..., None]
    if not constrained or not cset.l:
        return w * d
    if mode == "literal":
        return w * (1 + cset.l) * d
    Pd = np.einsum("...ij,...j->...i", tangent_projector(cset, R), d)
    return w * (d + Pd) if mode == "projected" else w * (d - Pd)


def jump_batch(P, u, d, minv, hbar):
    """Momentum jump along u/|u| with hbar M omega_eff = hbar (u.P) / (P.M^-1.d).

    Returns (P', accepted, argument).  For equal masses and u = omega d the
    argument is hbar M omega.
    """
    unorm = np.linalg.norm(u, axis=-1)
    den = np.sum(P * minv * d, axis=-1)
    good = (unorm > 0) & (den != 0)
    arg = np.where(good, hbar * np.sum(u * P, axis=-1) / np.where(den != 0, den, 1.0), 0.0)
    uh = np.where(good[..., None], u / np.where(unorm > 0, unorm, 1.0)[..., None], 0.0)
    p = np.sum(P * uh, axis=-1)
    disc = p * p + arg
    ok = disc >= 0
    dp = np.where(p >= 0, 1.0, -1.0) * np.sqrt(np.where(ok, disc, 0.0)) - p
    return P + np.where(ok, dp, 0.0)[..., None] * uh, ok, arg


# ------------------------------------------------------------ hop sampling


@dataclass(frozen=True)
class HopOutcome:
    pair: tuple
    factor: float
    jumped: bool
    frustrated: bool
    X: PhasePoint


def hop_batch(P, R, pairs, E, d, cset, cfg, u, hbar, constrained=True):
    """Importance-sampled transition kick for a batch.

    u: uniforms (K, 2).  Candidates are every change of the first index
    (amplitude v.d_{a b}) and of the second index (v.d_{a' b'}).  Candidates
    whose momentum jump would be frustrated are vetoed up front, so they
    drop out of the kick.  Over the feasible candidates the total rate is
    T = dt sum |tau|; hop with probability T/(1+T); both branches carry the
    factor (1+T), a hop additionally sign(tau).  ``frustrated`` flags draws
    that would have landed on a vetoed candidate had it been admitted.
    Returns (P, pairs, factor, hopped, frustrated).
    """
    K = P.shape[0]
    n = E.shape[-1]
    minv = cset.inv_masses
    v = P * minv
    k = np.arange(K)
    a, ap = pairs[:, 0], pairs[:, 1]
    old = np.concatenate([np.repeat(a[:, None], n, 1), np.repeat(ap[:, None], n, 1)], axis=1)   # (K, 2n)
    new = np.tile(np.arange(n), (K, 2))
    dv = d[k[:, None], old, new]                                                              # (K, 2n, N)
    tau = np.einsum("ki,kci->kc", v, dv)
    omega = (E[k[:, None], old] - E[k[:, None], new]) / hbar
    uvec = jump_vectors(cset, R[:, None, :], dv, omega, cfg.frequency_mode, constrained)
    Pj, ok, _ = jump_batch(P[:, None, :], uvec, dv, minv, hbar)
    mag_all = np.abs(tau)
    mag = np.where(ok, mag_all, 0.0)

    def draw(m):
        tot = m.sum(axis=1)
        T = tot * cfg.dt
        hop = u[:, 0] < T / (1.0 + T)
        cum = np.cumsum(m, axis=1)
        c = np.minimum(np.sum(cum <= (u[:, 1] * tot)[:, None], axis=1), 2 * n - 1)
        return T, hop, c

    T, hop, c = draw(mag)
    _, hop_all, c_all = draw(mag_all)
    frustrated = hop_all & ~ok[k, c_all]
    Pn = Pj[k, c]
    if cfg.project_after_jump and constrained and cset.l:
        Pn = project_momenta(cset, R, Pn)
    first = c < n
    factor = np.where(hop, np.sign(tau[k, c]), 1.0) * (1.0 + T)
    P = np.where(hop[:, None], Pn, P)
    pairs = pairs.copy()
    pairs[:, 0] = np.where(hop & first, new[k, c], a)
    pairs[:, 1] = np.where(hop & ~first, new[k, c], ap)
    return P, pairs, factor, hop, frustrated


def hop_decision(state: TrajectoryState, frame: AdiabaticFrame, cset: ConstraintSet, cfg: IntegratorConfig,
                 rng, hbar: float = 1.0) -> HopOutcome:
    """Single-trajectory wrapper around :func:`hop_batch`.

    ``rng`` is a :class:`Stream` (two draws) or a pair of uniforms.
    """
    u = np.array([[rng.random(), rng.random()]]) if isinstance(rng, Stream) else np.asarray(rng, float).reshape(1, 2)
    P, pairs, fac, acc, fr = hop_batch(state.X.P[None], state.X.R[None], np.array([state.pair]), frame.E[None],
                                       frame.d[None], cset, cfg, u, hbar)
    return HopOutcome(tuple(int(x) for x in pairs[0]), float(fac[0]), bool(acc[0]), bool(fr[0]),
                      state.X.replace(P=P[0]))


# ------------------------------------------------------------ ensembles


@dataclass
class EnsembleState:
    """Initial conditions for a batch of trajectories."""

    R: np.ndarray
    P: np.ndarray
    pairs: np.ndarray
    weights: np.ndarray
    masses: np.ndarray
    streams: Optional[np.ndarray] = None

    def __post_init__(self):
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.pairs = np.atleast_2d(np.asarray(self.pairs, dtype=np.int64))
        self.weights = np.asarray(self.weights, dtype=complex).reshape(-1)
        K = self.R.shape[0]
        if self.streams is None:
            self.streams = np.arange(K, dtype=np.uint64)
        self.streams = np.asarray(self.streams, dtype=np.uint64)
        if not (self.P.shape == self.R.shape and self.pairs.shape == (K, 2) and self.weights.shape == (K,)
                and self.streams.shape == (K,)):
            raise ValueError("inconsistent ensemble array shapes")

    def __len__(self):
        return self.R.shape[0]

    def subset(self, sl):
        return EnsembleState(self.R[sl], self.P[sl], self.pairs[sl], self.weights[sl], self.masses, self.streams[sl])


@dataclass
class ChunkResult:
    values: np.ndarray        # (K, T) complex, weight x observable element
    alive: np.ndarray         # (K,) bool
    truncated: np.ndarray     # (K,) bool
    hops: np.ndarray          # (T,) cumulative accepted hops
    frustrated: np.ndarray    # (T,) cumulative frustrated hops
    max_violation: np.ndarray  # (T,)


def _record_steps(times, dt):
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or times[0] < 0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be a non-empty increasing sequence starting at >= 0")
    steps = np.rint(times / dt).astype(np.int64)
    if np.any(np.abs(steps * dt - times) > 1e-9 * np.maximum(1.0, times)):
        raise ValueError("every requested time must be a multiple of dt")
    return steps


def _observable_elements(obs, model, R, P, masses, U, pairs):
    O = obs.evaluate_batch(R, P, masses)
    K = R.shape[0]
    k = np.arange(K)
    ub = U[k, :, pairs[:, 0]]
    ubp = U[k, :, pairs[:, 1]]
    return np.einsum("ki,kij,kj->k", ub, O, ubp)


def run_chunk(ens: EnsembleState, model: DiabaticModel, cset: ConstraintSet, cfg: IntegratorConfig,
              observable: MatrixPhaseFunction, steps, rng: CounterRNG, hbar: float = 1.0,
              hopping: bool = True, constrained: bool = True) -> ChunkResult:
    """Propagate one chunk and record weight x chi^{b b'}(X_t) at the given step indices."""
    R = ens.R.copy()
    P = ens.P.copy()
    pairs = ens.pairs.copy()
    W = ens.weights.copy()
    K = len(ens)
    T = len(steps)
    E, U, d, _, alive = adiabatic_arrays(model, R, None, cfg.gap_floor)
    values = np.zeros((K, T), dtype=complex)
    nhops = np.zeros(K, dtype=np.int64)
    hops_t = np.zeros(T, dtype=np.int64)
    frus_t = np.zeros(T, dtype=np.int64)
    viol_t = np.zeros(T)
    frus = 0
    truncated = np.zeros(K, dtype=bool)
    j = 0
    last = int(steps[-1])
    for s in range(last + 1):
        if s:
            R1, P1, th, ok = _segment_step(model, cset, cfg, R, P, pairs, hbar, constrained, strict=False)
            if constrained and cset.l:
                # the exact flow keeps sigma_dot fixed even after a non-tangent jump,
                # so a per-step change beyond 10x tolerance is an unresolved step
                with np.errstate(invalid="ignore", over="ignore"):
                    jump = np.abs(cset.sigma_dot(R1, P1) - cset.sigma_dot(R, P)).max(axis=-1)
                ok &= jump <= 10 * cfg.constraint_tol
            alive &= ok
            # retired trajectories stay frozen at their last finite state
            R = np.where(alive[:, None], R1, R)
            P = np.where(alive[:, None], P1, P)
            W = W * np.exp(1j * np.where(alive, th, 0.0))
            E, U, d, _, gap_ok = adiabatic_arrays(model, R, U, cfg.gap_floor)
            alive &= gap_ok
            if hopping and model.n > 1:
                u = rng.uniform(ens.streams, s, HOP_PURPOSE)
                P, pairs, fac, acc, fr = hop_batch(P, R, pairs, E, d, cset, cfg, u, hbar, constrained)
                W = W * fac
                nhops += acc & alive
                frus += int(np.sum(fr & alive))
                truncated |= nhops > cfg.max_hops
        # absolute drift is reported, not enforced: non-tangent jumps may leave sigma_dot != 0
        while j < T and steps[j] == s:
            live = alive & ~truncated
            vals = _observable_elements(observable, model, R, P, ens.masses, U, pairs) * W
            values[:, j] = np.where(live, vals, 0.0)
            sig, sd = _drift(cset, R, P)
            viol_t[j] = float(np.max(np.where(live, np.maximum(sig, sd), 0.0), initial=0.0))
            hops_t[j] = int(np.sum(nhops[live]))
            frus_t[j] = frus
            j += 1
    return ChunkResult(values, alive, truncated, hops_t, frus_t, viol_t)


def pairwise_sum(items):
    """Sum a list of arrays with a fixed balanced-tree order."""
    items = list(items)
    if not items:
        raise ValueError("nothing to sum")
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


@dataclass
class EnsembleResult:
    times: np.ndarray
    mean: np.ndarray          # complex
    stderr_re: np.ndarray
    stderr_im: np.ndarray
    hops: np.ndarray
    frustrated: np.ndarray
    max_violation: np.ndarray
    n_used: int
    n_truncated: int
    n_aborted: int

    def rows(self):
        for k in range(len(self.times)):
            yield dict(time=float(self.times[k]), re=float(self.mean[k].real), im=float(self.mean[k].imag),
                       se_re=float(self.stderr_re[k]), se_im=float(self.stderr_im[k]), hops=int(self.hops[k]),
                       frustrated=int(self.frustrated[k]), max_violation=float(self.max_violation[k]))


def map_chunks(fn, ens: EnsembleState, chunk_size: int, threads: int = 1):
    """Apply ``fn`` to fixed-size chunks; results come back in chunk order."""
    chunks = [ens.subset(slice(i, i + chunk_size)) for i in range(0, len(ens), chunk_size)]
    if threads <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def reduce_values(times, results: Sequence[ChunkResult], factors=None) -> EnsembleResult:
    """Mean and standard errors of the recorded values over live trajectories.

    ``factors`` optionally multiplies each chunk's values per trajectory and
    time (same layout as ``values``) before averaging.
    """
    sums, sq_re, sq_im, counts = [], [], [], []
    for i, r in enumerate(results):
        live = r.alive & ~r.truncated
        v = r.values if factors is None else r.values * factors[i]
        v = np.where(live[:, None], v, 0.0)
        sums.append(v.sum(axis=0))
        sq_re.append((v.real**2).sum(axis=0))
        sq_im.append((v.imag**2).sum(axis=0))
        counts.append(np.int64(live.sum()))
    n = int(pairwise_sum(counts))
    n_trunc = int(sum(int(r.truncated.sum()) for r in results))
    n_abort = int(sum(int((~r.alive).sum()) for r in results))
    if n == 0:
        raise RunError(f"no usable trajectories ({n_trunc} truncated, {n_abort} aborted)")
    mean = pairwise_sum(sums) / n
    var_re = np.maximum(pairwise_sum(sq_re) / n - mean.real**2, 0.0)
    var_im = np.maximum(pairwise_sum(sq_im) / n - mean.imag**2, 0.0)
    scale = 1.0 / np.sqrt(max(n - 1, 1))
    return EnsembleResult(np.asarray(times, dtype=float), mean, np.sqrt(var_re) * scale, np.sqrt(var_im) * scale,
                          pairwise_sum([r.hops for r in results]), pairwise_sum([r.frustrated for r in results]),
                          np.max(np.stack([r.max_violation for r in results]), axis=0), n, n_trunc, n_abort)


def propagate_ensemble(initial: EnsembleState, model: DiabaticModel, cset: ConstraintSet, cfg: IntegratorConfig,
                       observable: MatrixPhaseFunction, times, seed: int = 0, hbar: float = 1.0, threads: int = 1,
                       hopping: bool = True, constrained: bool = True) -> EnsembleResult:
    """Monte Carlo average of weight x chi^{b b'}(X_t) with standard errors.

    ``constrained=False`` runs the plain unconstrained algorithm (no
    multipliers, unprojected jumps) as a reference path.
    """
    steps = _record_steps(times, cfg.dt)
    rng = CounterRNG(seed)

    def work(chunk):
        return run_chunk(chunk, model, cset, cfg, observable, steps, rng, hbar, hopping, constrained)

    results = map_chunks(work, initial, cfg.chunk_size, threads)
    return reduce_values(times, results)
