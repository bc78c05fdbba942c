"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`KDMError`
so callers (and the CLI) can separate input problems from bugs.
"""


class KDMError(Exception):
    """Base class for library errors."""


class DimMismatch(KDMError, ValueError):
    pass


class ZeroVector(KDMError, ValueError):
    """A cosine kernel was evaluated on a vector with no direction."""


class BadWeights(KDMError, ValueError):
    """Weights cannot be turned into a point of the probability simplex."""


class InvalidKernel(KDMError, ValueError):
    pass


class KernelMismatch(KDMError, ValueError):
    """Input KDM kernel differs from the joint model's input kernel."""


class WrongKernelKind(KDMError, ValueError):
    pass


class ShapeMismatch(KDMError, ValueError):
    pass


class LabelShapeMismatch(ShapeMismatch):
    pass


class EmptyDataset(KDMError, ValueError):
    pass


class NonFiniteLoss(KDMError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ParseError(KDMError, ValueError):
    def __init__(self, row, col, message):
        super().__init__(f"row {row}, column {col}: {message}")
        self.row = row
        self.col = col


class SchemaError(KDMError, ValueError):
    pass


class InsufficientClassInstances(KDMError, ValueError):
    pass


class BadFractions(KDMError, ValueError):
    pass


class SingleClass(KDMError, ValueError):
    """AUC is undefined when only one class is present."""


class ModelDataMismatch(KDMError, ValueError):
    pass
