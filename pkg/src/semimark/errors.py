"""Exception hierarchy shared by every subsystem.

Each error carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class SemimarkError(Exception):
    exit_code = 1


class ConfigError(SemimarkError, ValueError):
    exit_code = 2


class InvalidBlockLength(ConfigError):
    pass


class InvalidKey(ConfigError):
    pass


class LengthMismatch(ConfigError):
    pass


class InvalidThreshold(ConfigError):
    pass


class InvalidDimension(ConfigError):
    pass


class ShapeError(ConfigError):
    pass


class WindowError(ConfigError):
    pass


class LandmarkError(ConfigError):
    pass


class NumericError(SemimarkError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, component=None):
        super().__init__(message if component is None else f"{component}: {message}")
        self.component = component


class FingerprintError(SemimarkError):
    exit_code = 4


class PluginNotFound(SemimarkError, LookupError):
    exit_code = 2


class PluginOutputError(SemimarkError):
    exit_code = 5


class StorageError(SemimarkError, OSError):
    exit_code = 5
