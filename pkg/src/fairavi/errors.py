"""Shared exception types, mapped to CLI exit codes 2 and 3."""


class ConfigError(ValueError):
    """Invalid configuration value; CLI exit code 2."""


class ContractError(RuntimeError):
    """Data or variant contract violation; CLI exit code 3."""
