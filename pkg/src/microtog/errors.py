"""Exception types shared across the package."""


class ValidationError(ValueError):
    """A config, file or argument failed validation."""


class ShapeError(ValidationError):
    """An array has the wrong shape; message names expected vs actual dims."""


class ParseError(ValidationError):
    """A file failed to parse; carries the byte offset where parsing stopped."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyDetectionsError(RuntimeError):
    """Raised when an attack needs benign detections but the image has none.

    Fabrication and mislabeling targets are built from the detector's own
    output on the clean image; with no detections the attack is undefined
    and the caller may fall back to the vanishing variant.
    """


class NonFiniteLossError(ArithmeticError):
    """A loss or gradient came out NaN/inf; names the offending component."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss; carries the last finite loss seen."""

    def __init__(self, message, last_finite_loss=None):
        super().__init__(message)
        self.last_finite_loss = last_finite_loss
