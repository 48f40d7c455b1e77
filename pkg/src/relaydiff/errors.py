"""Exception types shared across the package."""


class RelayDiffError(Exception):
    pass


class ConfigError(RelayDiffError, ValueError):
    pass


class DimensionError(RelayDiffError, ValueError):
    pass


class RangeError(RelayDiffError, ValueError):
    pass


class DomainError(RelayDiffError, ValueError):
    pass


class BatchError(RelayDiffError, ValueError):
    pass


class DegeneratePriorError(RelayDiffError, ValueError):
    pass


class NumericalError(RelayDiffError, FloatingPointError):
    """Non-finite values appeared during sampling or training."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class StageError(RelayDiffError, RuntimeError):
    """A pipeline stage failed; ``stage`` names which one."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class DivergenceError(NumericalError):
    """Training produced a non-finite loss.

    ``state`` holds the last parameters for which the loss was finite.
    """

    def __init__(self, message, step=None, state=None, checkpoint_path=None):
        super().__init__(message, step)
        self.state = state
        self.checkpoint_path = checkpoint_path


class ProtocolError(RelayDiffError):
    pass


class RetriableError(RelayDiffError):
    pass


class ResourceError(RelayDiffError, MemoryError):
    """A configured memory guard refused the requested work."""
