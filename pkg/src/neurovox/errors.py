"""Exception types shared across the toolkit."""


class NeurovoxError(Exception):
    """Base class for all toolkit errors."""


class FormatError(NeurovoxError):
    """A file is malformed or missing required information."""


class UnsupportedError(NeurovoxError):
    """A file or option is valid but outside the supported subset."""


class GeometryError(NeurovoxError):
    """Grids, shapes, or affines do not line up."""


class DomainError(NeurovoxError):
    """A parameter value is outside its documented domain."""


class DegenerateInputError(NeurovoxError):
    """Input data carries no usable signal for the requested operation."""


class ConvergenceError(NeurovoxError):
    """An iterative solver failed to converge within its budget."""
