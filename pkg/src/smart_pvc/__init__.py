"""Partially view-aligned multi-view clustering with semantic matching
contrastive learning, implemented on plain numpy."""

__version__ = "0.1.0"

from smart_pvc.errors import ConfigError, DataError, NumericError, SmartError

__all__ = ["ConfigError", "DataError", "NumericError", "SmartError", "__version__"]
