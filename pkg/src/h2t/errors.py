"""Exception hierarchy and the process exit codes shared by the CLI."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_INTERNAL = 5


class H2TError(Exception):
    """Base class for all toolkit errors."""

    exit_code = EXIT_INTERNAL


class ConfigError(H2TError):
    """Invalid flags, parameters, or config files (exit code 2)."""

    exit_code = EXIT_CONFIG


class DataError(H2TError):
    """Malformed, truncated, or inconsistent data (exit code 3)."""

    exit_code = EXIT_DATA


class NumericError(H2TError):
    """Non-finite values or numerically degenerate requests (exit code 4)."""

    exit_code = EXIT_NUMERIC
