"""Semi-supervised semantic segmentation with dual-level pixel contrast,
EMA-teacher pseudo supervision and class-aware pseudo-label thresholds."""
from .common import IGNORE, NumericError, ValidationError

__version__ = "0.1.0"
__all__ = ["IGNORE", "NumericError", "ValidationError", "__version__"]
