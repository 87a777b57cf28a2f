"""Exception hierarchy shared by all modules; the CLI maps each class to an exit code."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class ConfigurationError(ValueError):
    """Inconsistent or forbidden parameter combination."""


class NumericalError(ArithmeticError):
    """A solver failed to reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ResourceError(RuntimeError):
    """A combinatorial or memory guard was exceeded."""


EXIT_CODES = {
    ConfigurationError: 2,
    DomainError: 2,
    NumericalError: 3,
    ResourceError: 4,
}
