"""Exception hierarchy shared by all card modules."""


class CardError(Exception):
    """Base class for every error raised by the toolkit."""


class ShapeError(CardError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class DomainError(CardError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class AlignmentError(CardError):
    """PCA alignment is undefined (collinear or too few atoms)."""


class OrderingError(CardError):
    """An atom ordering cannot be produced for the given context."""


class ScaleError(CardError, ValueError):
    """A coordinate lies outside the open box (-a/2, a/2)."""


class CodecError(CardError, ValueError):
    """A mixed sequence violates digit or residual ranges."""


class VocabularyError(CardError, KeyError):
    """An atomic number has no embedding row."""


class ConfigError(CardError, ValueError):
    """Invalid configuration value."""


class ConvergenceError(CardError):
    """An iterative solver failed to converge.

    Attributes carry whatever diagnostic state the solver had when it gave up.
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class NumericalError(CardError, FloatingPointError):
    """A loss or estimate became non-finite."""


class FormatError(CardError):
    """A binary or text file is malformed or fails its checksum."""


class UnsupportedError(CardError):
    """The requested computation is not supported for this input."""
