"""Constrained quantum-classical dynamics with Dirac brackets.

Modules: ``phase`` (phase-space points and brackets), ``constraints``
(holonomic constraint sets), ``dirac`` (Dirac bracket structure),
``quantum`` (diabatic models and adiabatic frames), ``propagator``
(constrained surface-hopping ensembles), ``statmech`` (stationary density
and samplers), ``response`` (linear response) and ``cli``.
"""

from .constraints import ConstraintSet, HolonomicConstraint, constraint_gallery
from .dirac import DiracEngine, MatrixPhaseFunction, dirac_bracket, matrix_dirac_bracket
from .errors import (ConfigError, DegeneracyError, DegenerateConstraintError, DiracQCError, DimensionError,
                     EvaluationError, FrustratedHop, PathTooCoarseError, RunError, StepRejected)
from .phase import PhasePoint, PhysicalConstants, ScalarPhaseFunction, poisson_bracket
from .propagator import EnsembleState, IntegratorConfig, TrajectoryState, propagate_ensemble
from .quantum import DiabaticModel, adiabatize, model_gallery
from .response import Perturbation, ResponseRequest, convolve_response, response_phi
from .rng import CounterRNG
from .statmech import StationaryDensity, rho0, rho1, sample_stationary

__version__ = "0.1.0"
