class VrmError(Exception):
    """Base class for every error raised by the package."""


class DomainError(VrmError, ValueError):
    """A numeric argument lies outside the domain of the operation."""


class ShapeError(VrmError, ValueError):
    """Operand shapes or feature dimensions do not match."""


class SchemaError(VrmError, ValueError):
    """A dataset record or checkpoint does not follow the expected schema."""


class ConfigError(VrmError, ValueError):
    """A configuration section holds an unknown key or an invalid value."""


class NonFiniteLossError(VrmError, RuntimeError):
    """
    Training produced a NaN or infinite loss.

    Attributes:
        batch_index (int): Index of the optimizer step that failed.
        breakdown: The loss breakdown of the offending batch.
    """

    def __init__(self, batch_index: int, breakdown):
        super().__init__(
            f"Non-finite loss at batch {batch_index}: {breakdown}"
        )
        self.batch_index = batch_index
        self.breakdown = breakdown
