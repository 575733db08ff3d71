"""Exception types shared across the simulator."""


class ConfigurationError(ValueError):
    """Raised for invalid experiment or population configuration."""


class TrainingDiverged(RuntimeError):
    """Raised when local training produces a non-finite loss or gradient.

    The engine treats this as a client failure for the round.
    """


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be parsed or fails integrity checks."""
