"""
lowbit_quant - Low-bit post-training quantization of linear layers

This package provides:
- Twin-log weight quantization with search-based clipping
- A shift-only integer execution simulator
- Adaptive activation rotation (block Hadamard or greedy dual transform)
- Calibration, simulation and error reports over layer corpora
"""

from lowbit_quant.config import ClipGrid, PairGrid, QuantConfig, load_config
from lowbit_quant.console import Colors
from lowbit_quant.core import LayerPipeline
from lowbit_quant.models import (
    RotationMode,
    RotationPlan,
    Scheme,
    ShiftArtifact,
    TwinLogArtifact,
    UniformArtifact,
)

__version__ = "1.0.0"
__all__ = [
    "ClipGrid",
    "PairGrid",
    "QuantConfig",
    "load_config",
    "Colors",
    "LayerPipeline",
    "RotationMode",
    "RotationPlan",
    "Scheme",
    "ShiftArtifact",
    "TwinLogArtifact",
    "UniformArtifact",
]
