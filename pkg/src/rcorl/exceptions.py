class RcorlError(Exception):
    """Base class for errors raised by this package."""


class ContractError(RcorlError, ValueError):
    """A precondition on arguments or object state was violated."""


class InputShapeError(ContractError):
    pass


class NumericError(RcorlError, ArithmeticError):
    def __init__(self, message, layer=None, step=None):
        super().__init__(message)
        self.layer = layer
        self.step = step


class TrainingError(NumericError):
    """Training diverged (non-finite loss or parameters)."""


class EvaluationError(RcorlError):
    pass


class CollectionError(RcorlError):
    pass


class FormatError(RcorlError):
    """A container file is malformed, truncated or from another format version."""


class ChecksumError(FormatError):
    pass


class NotFittedError(RcorlError, AttributeError):
    pass
