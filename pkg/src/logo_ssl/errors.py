"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that break its contract."""


class NonFiniteError(FloatingPointError):
    """A forward pass or loss produced NaN/inf."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class CheckpointError(IOError):
    """A checkpoint archive could not be read back."""
