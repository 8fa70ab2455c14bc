"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of its documented range or missing."""


class NumericError(RuntimeError):
    """A non-finite value or other numeric failure was detected."""
