"""Exception hierarchy shared by every capsfold module."""


class CapsfoldError(Exception):
    """Base class; the CLI maps these to exit code 2 (data error)."""


class MalformedRecord(CapsfoldError):
    def __init__(self, line_no, reason=""):
        self.line_no = line_no
        msg = f"malformed ATOM record at line {line_no}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class EmptyStructure(CapsfoldError):
    pass


class ShapeMismatch(CapsfoldError, ValueError):
    pass


class IndexOutOfRange(CapsfoldError, IndexError):
    pass


class TapeMissing(CapsfoldError, RuntimeError):
    pass


class TooFewSamples(CapsfoldError):
    pass


class DivergedLoss(CapsfoldError, FloatingPointError):
    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"loss became non-finite ({loss}) in epoch {epoch}")


class EmptyVector(CapsfoldError, ValueError):
    pass


class FormatError(CapsfoldError):
    """Raised when a CVOX or CWTS file fails validation."""
