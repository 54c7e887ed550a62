"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Invalid configuration or usage; the CLI maps this to exit code 2."""


class DataError(ValueError):
    """Malformed or unusable input data (parse failures, empty logs)."""
