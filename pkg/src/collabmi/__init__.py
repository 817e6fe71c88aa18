"""Collaborative bird's-eye-view perception trained with a contrastive multi-view MI objective."""
from .errors import ConfigError, ContractError, DimensionError, GenerationError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DimensionError", "GenerationError"]
