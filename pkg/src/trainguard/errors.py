"""Exception types shared across the package."""


class TrainGuardError(Exception):
    pass


class DimensionError(TrainGuardError, ValueError):
    """Operands have incompatible lengths or shapes."""


class ParameterError(TrainGuardError, ValueError):
    """An argument is outside its valid domain."""


class FormatError(TrainGuardError, ValueError):
    """Serialized bytes are malformed or from an unknown format version."""


class InitializationError(TrainGuardError, RuntimeError):
    """The controller could not establish its reference signal."""


class ConfigError(TrainGuardError, ValueError):
    """An experiment or CLI configuration is invalid."""


class RunError(TrainGuardError, RuntimeError):
    """One run of an experiment failed; the message names the seed."""

    def __init__(self, seed_index: int, arm: str, message: str):
        super().__init__(f"seed {seed_index} ({arm}) failed: {message}")
        self.seed_index = seed_index
        self.arm = arm
