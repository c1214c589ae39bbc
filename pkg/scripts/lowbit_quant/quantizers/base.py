"""Base class for weight quantizers."""

from abc import ABC, abstractmethod

import numpy as np

from lowbit_quant.models import BaseArtifact


class BaseWeightQuantizer(ABC):
    """Abstract base class for per-channel weight quantizers."""

    @property
    @abstractmethod
    def name(self) -> str:
        """Return the quantizer name."""
        pass

    @property
    @abstractmethod
    def description(self) -> str:
        """Return a brief description of the quantization scheme."""
        pass

    @abstractmethod
    def quantize(self, weights: np.ndarray, bits: int) -> BaseArtifact:
        """
        Quantize a weight matrix, one parameter set per output row.

        Args:
            weights: Real matrix, out_channels x in_channels
            bits: Bit width (>= 2)

        Returns:
            The quantized artifact
        """
        pass

    @abstractmethod
    def dequantize(self, artifact: BaseArtifact) -> np.ndarray:
        """Reconstruct a float64 weight matrix from an artifact."""
        pass

    def weight_error(self, weights: np.ndarray, bits: int) -> float:
        """L2 (Frobenius) norm of the round-trip error."""
        weights = np.asarray(weights, dtype=np.float64)
        diff = self.dequantize(self.quantize(weights, bits)) - weights
        return float(np.sqrt(np.sum(diff * diff)))

    def quantize_multiple(self, matrices: dict[str, np.ndarray], bits: int) -> dict[str, BaseArtifact]:
        """
        Quantize several matrices.

        Args:
            matrices: Dictionary of {layer name: weights}
            bits: Bit width shared by every matrix

        Returns:
            Dictionary of {layer name: artifact} in input order
        """
        return {name: self.quantize(w, bits) for name, w in matrices.items()}
