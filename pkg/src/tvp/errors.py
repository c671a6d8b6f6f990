"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TVPError(Exception):
    exit_code = 1


class ValidationError(TVPError, ValueError):
    exit_code = 2


class BoundsError(ValidationError):
    pass


class InsufficientFramesError(ValidationError):
    pass


class ConfigError(TVPError):
    exit_code = 2


class MissingPrerequisite(TVPError):
    exit_code = 3


class NumericError(TVPError, FloatingPointError):
    exit_code = 4


class FormatError(TVPError):
    exit_code = 5


class IntegrityError(TVPError):
    exit_code = 5
