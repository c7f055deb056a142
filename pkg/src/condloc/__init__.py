"""Condition-routed global descriptors for retrieval-based localization on a synthetic world."""

from .config import RunConfig, parse_config
from .errors import CondLocError

__version__ = "0.1.0"
__all__ = ["RunConfig", "parse_config", "CondLocError", "__version__"]
