"""Simulation and analysis toolkit for single color-center characterization."""

from .core import (
    CorrelationHistogram,
    FitResult,
    RngSpec,
    TimeTag,
    TimeTagStream,
    count_rate,
    merge_streams,
)
from .emitter_sim import DetectionModel, EmitterRates, ScanSpec

__version__ = "0.1.0"

__all__ = [
    "CorrelationHistogram",
    "DetectionModel",
    "EmitterRates",
    "FitResult",
    "RngSpec",
    "ScanSpec",
    "TimeTag",
    "TimeTagStream",
    "count_rate",
    "merge_streams",
    "__version__",
]
