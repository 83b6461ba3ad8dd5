"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems -> 2,
numerical failures -> 3, infeasible designs/levels -> 4.
"""


class PwerError(Exception):
    """Base class for all package errors."""


class ConfigError(PwerError, ValueError):
    """Invalid configuration document or argument outside its domain."""


class NumericalError(PwerError, ArithmeticError):
    """A numerical routine failed (bracket failure, integration budget, ...)."""


class InfeasibleDesignError(PwerError):
    """The design cannot support the requested computation (empty arms, ...)."""
