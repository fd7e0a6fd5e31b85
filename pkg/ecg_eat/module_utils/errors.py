"""Error types raised across ecg_eat.

Each error carries the process exit code the command line front-end reports for it.
"""


class EcgEatError(Exception):
    """Base class of every error raised by ecg_eat."""

    exit_code = 1

    def __init__(self, msg):
        super().__init__(msg)
        self.msg = msg


class InvalidArgument(EcgEatError, ValueError):
    """An operation received arguments outside its contract."""

    exit_code = 2


class ConfigError(EcgEatError):
    """The run configuration failed validation."""

    exit_code = 2


class MissingPrerequisite(EcgEatError):
    """A pipeline stage was asked to run before the stage it depends on."""

    exit_code = 3

    def __init__(self, msg, stage):
        super().__init__(msg)
        self.stage = stage


class NumericalFailure(EcgEatError):
    """A statistic could not be computed (zero variance, empty support, ...)."""

    exit_code = 4


class ArtifactError(EcgEatError):
    """An artifact could not be read or written."""

    exit_code = 3

    def __init__(self, msg, path):
        super().__init__(f"{msg}: {path}")
        self.path = path


class DegenerateInputWarning(UserWarning):
    """Raised through `warnings` when a documented fallback value is returned."""


def require(condition, msg):
    """Raise InvalidArgument with `msg` unless `condition` holds."""
    if not condition:
        raise InvalidArgument(msg)
