"""Exception hierarchy shared across the package."""


class EcinnError(Exception):
    """Base class for all package errors."""


class ContractError(EcinnError, ValueError):
    """An argument violates an operation's precondition (shape, range, ...)."""


class StateError(EcinnError, RuntimeError):
    """An operation was called in the wrong state, e.g. backward without a recorded forward."""


class NumericOverflowError(EcinnError, FloatingPointError):
    def __init__(self, layer_index: int, message: str = ""):
        self.layer_index = layer_index
        super().__init__(message or f"non-finite values produced by layer {layer_index}")


class DivergedError(EcinnError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch_index: int, report=None):
        self.epoch = epoch
        self.batch_index = batch_index
        self.report = report
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")


class FormatError(EcinnError, ValueError):
    """A binary file is malformed."""


class TruncatedFileError(FormatError):
    pass


class MissingGroupError(EcinnError, KeyError):
    def __init__(self, cls: int):
        self.cls = cls
        super().__init__(f"class {cls} has no samples in the index")

    def __str__(self):
        return self.args[0]


class ParallelDirectionError(EcinnError, ArithmeticError):
    """The counterfactual direction never crosses the decision boundary."""
