class WitunetError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(WitunetError):
    """Tensor dimensions do not satisfy an op's contract."""


class ConfigError(WitunetError):
    """Inconsistent or out-of-range configuration."""


class StateError(WitunetError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class UsageError(WitunetError):
    """Bad CLI/API usage such as unknown config keys or empty inputs."""


class TrainingDiverged(WitunetError):
    """Loss went non-finite; carries the step index and worst parameter."""

    def __init__(self, step, param_name, message):
        super().__init__(message)
        self.step = step
        self.param_name = param_name
