"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A run configuration is missing, malformed, or internally inconsistent."""


class DataFormatError(ValueError):
    """An input file or dataset does not match its documented format."""
