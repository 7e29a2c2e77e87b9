"""Shared exception types, mapped to CLI exit codes by the workbench."""


class PropGvaeError(Exception):
    """Base class for all package errors."""


class ConfigError(PropGvaeError):
    """Invalid configuration value or malformed config file (exit code 2)."""


class DataError(PropGvaeError):
    """Unusable input data: missing files, bad formats, parse failures (exit code 3)."""


class NumericError(PropGvaeError):
    """Numeric failure such as a non-finite value in a forward pass (exit code 4)."""
