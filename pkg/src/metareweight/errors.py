"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes or label ranges do not match the model or each other."""


class NonFiniteError(ValueError):
    """An input or computed value contains NaN or infinity."""


class IdxParseError(ValueError):
    """An IDX file violates the format rules (magic, counts, payload size)."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or inconsistent."""
