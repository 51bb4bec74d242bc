"""Exception types raised across the package.

Every error derives from :class:`BlendiffError` so callers (notably the CLI)
can map whole families onto exit codes.
"""


class BlendiffError(Exception):
    """Base class for all package errors."""


class InputError(BlendiffError, ValueError):
    """Malformed input: bad shapes, files, or arguments."""


class NumericalError(BlendiffError, ArithmeticError):
    """A numerical routine could not produce a valid result."""


class ConvergenceError(BlendiffError):
    """An iterative solver stopped before meeting its tolerances."""


# numerics
class NotPositiveDefinite(NumericalError):
    pass


class NotSymmetric(NumericalError):
    pass


class NotPSD(NumericalError):
    pass


class NonScalarLoss(InputError):
    pass


class FormatError(InputError):
    pass


# mesh
class ParseError(InputError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class IndexOutOfRange(InputError):
    pass


class DimensionMismatch(InputError):
    pass


ShapeMismatch = DimensionMismatch


# deformation transfer
class NoCompatibleFace(NumericalError):
    pass


class DegenerateTriangle(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


# coefficient fitting
class RankDeficientBlendshapes(NumericalError):
    pass


class MaxIterations(ConvergenceError):
    """Raised when the QP solver runs out of iterations.

    The best iterate and its diagnostics are kept on the exception so the
    caller can still write a (flagged) partial result.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


# audio
class UnsupportedEncoding(InputError):
    pass


class CorruptHeader(InputError):
    pass


class TooShort(InputError):
    pass


class EmptyInput(InputError):
    pass


# training / metrics
class NaNLoss(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class Degenerate(NumericalError):
    pass


class Infeasible(NumericalError):
    pass


class AllMaskedRow(NumericalError):
    pass
