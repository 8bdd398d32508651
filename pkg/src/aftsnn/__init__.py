"""Event-driven training of spiking neural networks with adaptive firing thresholds."""

from .errors import ConfigError, DataError, FormatError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "FormatError", "NumericError", "__version__"]
