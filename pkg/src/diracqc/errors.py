"""Exception types raised across the package."""


class DiracQCError(Exception):
    """Base class for all package errors."""


class DimensionError(DiracQCError, ValueError):
    """Array shapes or sizes are inconsistent."""


class EvaluationError(DiracQCError, ArithmeticError):
    """A function or derivative evaluated to a non-finite value."""

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (component {index})")
        self.index = index


class DegenerateConstraintError(DiracQCError, ArithmeticError):
    """The constraint Gram matrix Z is singular or not positive definite."""

    def __init__(self, message, pair=None):
        if pair is not None:
            message = f"{message} (constraints {pair[0]} and {pair[1]})"
        super().__init__(message)
        self.pair = pair


class DegeneracyError(DiracQCError, ArithmeticError):
    """Two adiabatic energies are closer than the gap floor."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class PathTooCoarseError(DiracQCError):
    """Consecutive adiabatic frames overlap too weakly to fix the gauge."""


class FrustratedHop(DiracQCError):
    """A momentum jump would need negative kinetic energy along its direction."""

    def __init__(self, message, argument=None):
        super().__init__(message)
        self.argument = argument


class StepRejected(DiracQCError):
    """Constraint drift after a step exceeded the allowed bound."""


class ConfigError(DiracQCError, ValueError):
    """Invalid run configuration."""

    def __init__(self, message, field=None, line=None):
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} [{', '.join(where)}]" if where else message)
        self.field = field
        self.line = line


class RunError(DiracQCError):
    """A run could not produce any usable result."""
