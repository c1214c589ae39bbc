"""Weight quantizers."""

from lowbit_quant.config import PairGrid
from lowbit_quant.models import Scheme
from lowbit_quant.quantizers.base import BaseWeightQuantizer
from lowbit_quant.quantizers.twinlog import TwinLogWeightQuantizer
from lowbit_quant.quantizers.uniform import UniformWeightQuantizer


def get_quantizer(scheme: Scheme, grid: PairGrid | None = None) -> BaseWeightQuantizer:
    """Return the quantizer implementing a scheme."""
    if scheme is Scheme.TLQ:
        return TwinLogWeightQuantizer(grid)
    return UniformWeightQuantizer()


__all__ = [
    "BaseWeightQuantizer",
    "TwinLogWeightQuantizer",
    "UniformWeightQuantizer",
    "get_quantizer",
]
