"""Source-aware audio-visual question answering on a small numpy autodiff core."""

from .errors import ContractError, CorruptionError, FormatError, NumericAbort, SasrError, ShapeError

__version__ = "0.1.0"

__all__ = ["ContractError", "CorruptionError", "FormatError", "NumericAbort", "SasrError", "ShapeError", "__version__"]
