"""Random walk loop soup laboratory on Z^d."""
from .errors import ConfigurationError, DomainError, NumericalError, ResourceError

__version__ = "0.1.0"
__all__ = ["ConfigurationError", "DomainError", "NumericalError", "ResourceError"]
