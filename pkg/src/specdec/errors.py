"""Exception hierarchy shared across the package."""


class SpecDecError(Exception):
    """Base class for all package errors."""


class DimensionError(SpecDecError):
    """Shapes or sizes that cannot be combined."""


class ConfigError(SpecDecError):
    """Invalid configuration values (CLI exit code 2)."""


class ContractError(SpecDecError):
    """A numeric contract was violated (all-masked softmax row, non-scalar loss, ...)."""


class CapacityError(SpecDecError):
    """Sequence length would exceed the configured maximum."""


class TrainingError(SpecDecError):
    """Training diverged; carries the offending step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class StructureError(SpecDecError):
    """Malformed draft tree (bad parent links, budget violations)."""


class ProtocolError(SpecDecError):
    """Malformed or inconsistent wire message."""


class SessionError(SpecDecError):
    """Client/server state divergence or session abort."""


class CheckpointError(SpecDecError):
    """Unreadable checkpoint or reference-hash mismatch."""
