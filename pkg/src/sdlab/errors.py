"""Shared exception types, mapped to CLI exit codes in cli.py."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation's contract."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ConfigError(ValueError):
    """Bad configuration value or unknown configuration key."""


class InjectionError(ValueError):
    """An attention/feature override does not match the captured geometry."""


class AlignmentError(ValueError):
    """Source and target prompts cannot be aligned for the requested edit."""


class CheckpointError(ValueError):
    """Corrupt or foreign checkpoint container."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class NumericAbort(RuntimeError):
    """A non-finite value appeared where the pipeline requires finite data."""


class FrozenError(RuntimeError):
    """A frozen component's weights changed after its freeze point."""
