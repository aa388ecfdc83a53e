"""Exception hierarchy."""


class SrmpcError(Exception):
    """Base class for all package errors."""


class InputError(SrmpcError, ValueError):
    """Dimension mismatch or invalid argument."""


class NumericDomainError(SrmpcError, ArithmeticError):
    """An evaluator produced a non-finite value."""


class RegularityError(SrmpcError):
    """G_uu is not positive definite at some stage of a backward sweep."""

    def __init__(self, stage, min_eig):
        self.stage = int(stage)
        self.min_eig = float(min_eig)
        super().__init__(
            f"G_uu not positive definite at stage {self.stage} (min eigenvalue {self.min_eig:.3e})"
        )


class DivergenceError(SrmpcError):
    """A forward simulation left the finite domain."""

    def __init__(self, stage, message=None):
        self.stage = int(stage)
        super().__init__(message or f"state became non-finite at stage {self.stage}")


class ConfigError(SrmpcError):
    """Invalid experiment configuration."""
