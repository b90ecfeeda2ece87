"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. backward on a non-scalar)."""


class ConfigError(ValueError):
    """Invalid model, routing, or experiment configuration."""


class UnknownTaskError(LookupError):
    """A task index or name is not present in the task registry."""


class DegenerateBatchError(ValueError):
    """A batch contains no trainable positions (all padded)."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed, truncated, or incompatible."""
