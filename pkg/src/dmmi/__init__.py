"""Referring image segmentation that handles zero, one, or many targets per expression."""
from dmmi.metrics import MetricsReport, evaluate
from dmmi.model import DMMI

__all__ = ["DMMI", "MetricsReport", "evaluate"]
__version__ = "0.1.0"
