"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Data handed to an operation violates its preconditions."""


class InvalidConfigError(ValueError):
    """A configuration value is out of its allowed range."""


class NonFiniteGradientError(RuntimeError):
    """Raised when a training step produces NaN or infinite gradients."""
