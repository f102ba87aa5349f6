class ValidationError(ValueError):
    """An input violates a documented contract (shape, range, invariant)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite. ``checkpoint`` holds the last good state."""

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step
