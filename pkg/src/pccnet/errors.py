"""Shared exception types.

Four failure families, mapped by the CLI onto exit codes: shape/contract/format
problems exit 1, training divergence exits 2.
"""


class ShapeError(ValueError):
    """Tensor shape or dtype algebra violation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class FormatError(ValueError):
    """A binary or text artifact is malformed. Carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(RuntimeError):
    """Training diverged (NaN loss or NaN gradient)."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
