"""Multimodal sheaf network for paired-graph classification with missing-modality reconstruction."""

from .errors import ConfigError, ContractError, NumericError, ParseError, ValidationError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "NumericError", "ParseError", "ValidationError", "__version__"]
