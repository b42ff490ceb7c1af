"""Phase-space primitives: points, scalar phase functions, Poisson brackets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DimensionError, EvaluationError

FD_SCALE = np.finfo(float).eps ** (1.0 / 3.0)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PhasePoint:
    """Positions ``R``, momenta ``P`` and per-degree-of-freedom ``masses``."""

    R: np.ndarray
    P: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        R, P, m = (np.atleast_1d(_frozen(v)) for v in (self.R, self.P, self.masses))
        if R.ndim != 1 or R.shape != P.shape or R.shape != m.shape or R.size == 0:
            raise DimensionError(
                f"R, P and masses must be 1-d with equal length >= 1, got {R.shape}, {P.shape}, {m.shape}"
            )
        if np.any(~(m > 0)):
            raise DimensionError("all masses must be strictly positive")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "masses", m)

    @property
    def N(self) -> int:
        return self.R.size

    @property
    def X(self) -> np.ndarray:
        return np.concatenate([self.R, self.P])

    @property
    def velocity(self) -> np.ndarray:
        return self.P / self.masses

    @property
    def kinetic_energy(self) -> float:
        return 0.5 * float(np.sum(self.P**2 / self.masses))

    @classmethod
    def from_flat(cls, x, masses) -> "PhasePoint":
        x = np.asarray(x, dtype=float)
        n = x.size // 2
        return cls(x[:n], x[n:], masses)

    def replace(self, R=None, P=None) -> "PhasePoint":
        return PhasePoint(self.R if R is None else R, self.P if P is None else P, self.masses)


@dataclass(frozen=True)
class PhysicalConstants:
    hbar: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not (self.hbar > 0 and self.beta > 0):
            raise ValueError("hbar and beta must be positive")


@dataclass(frozen=True)
class ScalarPhaseFunction:
    """A real function of phase space with an optional analytic gradient.

    ``value`` maps a :class:`PhasePoint` to a float.  ``grad``, when given,
    returns the length-2N gradient ordered as (d/dR, d/dP).
    """

    value: Callable[[PhasePoint], float]
    grad: Optional[Callable[[PhasePoint], np.ndarray]] = None
    name: str = ""

    def __call__(self, X: PhasePoint) -> float:
        return float(self.value(X))

    def gradient(self, X: PhasePoint, h=None) -> np.ndarray:
        if self.grad is None:
            return fd_gradient(self, X, h)
        return np.asarray(self.grad(X), dtype=float)

    def __mul__(self, other: "ScalarPhaseFunction") -> "ScalarPhaseFunction":
        a, b = self, other

        def grad(X):
            return a.gradient(X) * b(X) + a(X) * b.gradient(X)

        return ScalarPhaseFunction(lambda X: a(X) * b(X), grad, f"({a.name}*{b.name})")

    @classmethod
    def position(cls, k: int) -> "ScalarPhaseFunction":
        def grad(X):
            g = np.zeros(2 * X.N)
            g[k] = 1.0
            return g

        return cls(lambda X: X.R[k], grad, f"R{k}")

    @classmethod
    def momentum(cls, k: int) -> "ScalarPhaseFunction":
        def grad(X):
            g = np.zeros(2 * X.N)
            g[X.N + k] = 1.0
            return g

        return cls(lambda X: X.P[k], grad, f"P{k}")


def symplectic_matrix(N: int) -> np.ndarray:
    """Return the 2N x 2N block matrix [[0, I], [-I, 0]]."""
    if int(N) != N or N < 1:
        raise DimensionError(f"symplectic matrix needs N >= 1, got {N}")
    N = int(N)
    B = np.zeros((2 * N, 2 * N))
    B[:N, N:] = np.eye(N)
    B[N:, :N] = -np.eye(N)
    return B


def fd_steps(x, h=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if h is None:
        return FD_SCALE * np.maximum(1.0, np.abs(x))
    h = np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    if np.any(~(h > 0)):
        raise ValueError("finite-difference step must be positive")
    return h


def fd_gradient(f, X: PhasePoint, h=None) -> np.ndarray:
    """Central-difference gradient of ``f`` with respect to X = (R, P)."""
    x = X.X
    steps = fd_steps(x, h)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        # exact representable step so (xp - xm) is what we divide by
        xp[i] += steps[i]
        xm[i] -= steps[i]
        fp = f(PhasePoint.from_flat(xp, X.masses))
        fm = f(PhasePoint.from_flat(xm, X.masses))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError("non-finite function value in finite-difference stencil", i)
        g[i] = (fp - fm) / (xp[i] - xm[i])
    return g


def _checked_gradient(f, X) -> np.ndarray:
    g = f.gradient(X) if hasattr(f, "gradient") else fd_gradient(f, X)
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise EvaluationError("non-finite gradient", int(bad[0]))
    return g


def poisson_bracket(a, b, X: PhasePoint) -> float:
    """{a, b} = da/dR . db/dP - da/dP . db/dR."""
    ga = _checked_gradient(a, X)
    gb = _checked_gradient(b, X)
    N = X.N
    return float(ga[:N] @ gb[N:] - ga[N:] @ gb[:N])


def random_polynomial(rng: np.random.Generator, dim: int, n_terms: int = 6, max_degree: int = 3,
                      scale: float = 1.0) -> ScalarPhaseFunction:
    """Random sparse polynomial in the 2N phase-space coordinates, with exact gradient.

    Used by the check suite and the property tests as a source of smooth
    test functions.
    """
    powers = rng.integers(0, max_degree + 1, size=(n_terms, dim))
    # thin out so most monomials touch only a few coordinates
    powers *= rng.random((n_terms, dim)) < min(1.0, 3.0 / dim)
    coef = scale * rng.normal(size=n_terms)

    def value(X):
        x = X.X
        return float(np.sum(coef * np.prod(x[None, :] ** powers, axis=1)))

    def grad(X):
        x = X.X
        g = np.zeros(dim)
        for c, p in zip(coef, powers):
            for k in np.flatnonzero(p):
                q = p.copy()
                q[k] -= 1
                g[k] += c * p[k] * np.prod(x**q)
        return g

    return ScalarPhaseFunction(value, grad, "poly")
