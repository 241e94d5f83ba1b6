"""ASR error and disfluency labeling plus token-level hidden-state mixup."""

__version__ = "0.1.0"

from .errors import InvalidConfigError, InvalidInputError, NonFiniteGradientError  # noqa: E402

__all__ = ["InvalidConfigError", "InvalidInputError", "NonFiniteGradientError", "__version__"]
