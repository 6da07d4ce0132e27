"""Exception hierarchy shared across the package."""


class O2MError(Exception):
    """Base class for all package errors."""


class ShapeError(O2MError, ValueError):
    pass


class ChannelMismatchError(ShapeError):
    pass


class MissingDerivativeError(O2MError, RuntimeError):
    """Raised when backward reaches an op that has no registered derivative."""


class NonFiniteError(O2MError, FloatingPointError):
    pass


class ImageDecodeError(O2MError, OSError):
    pass


class CheckpointError(O2MError, OSError):
    pass


class TrainingDivergedError(NonFiniteError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"non-finite loss at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
