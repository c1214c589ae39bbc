"""
Asymmetric uniform quantizer.

    s = (max - min) / (2^b - 1)
    z = round(min / s)
    q = clamp(round(x / s) - z, 0, 2^b - 1)
    x_f = s * (q + z)

Used per-channel (static) for weights and per-token (dynamic) for activations.
"""

import logging

import numpy as np

from lowbit_quant.errors import QuantizationError
from lowbit_quant.models import (
    BaseArtifact,
    TokenQuantization,
    UniformArtifact,
    UniformParams,
)
from lowbit_quant.quantizers.base import BaseWeightQuantizer

logger = logging.getLogger(__name__)

# scale >= peak * 2^-24 keeps |z| = |round(min / s)| <= 2^24
RELATIVE_SCALE_FLOOR = 2.0**-24
INT32_MAX = np.iinfo(np.int32).max


def round_half_away(x: np.ndarray | float) -> np.ndarray:
    """Round to nearest integer, ties away from zero (float64 result)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def check_bits(bits: int) -> int:
    if int(bits) != bits or bits < 2:
        raise QuantizationError(f"bit width must be an integer >= 2, got {bits}")
    return int(bits)


def _finite(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise QuantizationError(f"{what} is empty")
    if not np.all(np.isfinite(x)):
        raise QuantizationError(f"{what} contains non-finite values")
    return x


def _range_params(lo: np.ndarray, hi: np.ndarray, qmax: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Scale and zero point per range; degenerate ranges get s=1, z=round(min).

    Near-constant ranges are floored at RELATIVE_SCALE_FLOOR times their
    peak magnitude.
    """
    degenerate = hi <= lo
    floor = np.maximum(np.abs(lo), np.abs(hi)) * RELATIVE_SCALE_FLOOR
    scale = np.where(degenerate, 1.0, np.maximum((hi - lo) / qmax, floor))
    zero = round_half_away(lo / scale)
    return scale, zero


def uniform_quantize(x: np.ndarray, bits: int) -> tuple[np.ndarray, UniformParams]:
    """
    Per-tensor uniform quantization of any real array.

    Raises:
        QuantizationError: empty or non-finite input, bits < 2
    """
    bits = check_bits(bits)
    x = _finite(x, "input")
    qmax = 2**bits - 1
    scale, zero = _range_params(np.min(x), np.max(x), qmax)
    codes = np.clip(round_half_away(x / scale) - zero, 0, qmax).astype(np.int32)
    params = UniformParams(bits=bits, scale=float(scale), zero_point=int(zero))
    return codes, params


def uniform_dequantize(codes: np.ndarray, params: UniformParams) -> np.ndarray:
    """x_f = s * (codes + z)."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() > params.qmax):
        raise QuantizationError(
            f"code outside [0, {params.qmax}] for a {params.bits}-bit quantizer"
        )
    return params.scale * (codes + params.zero_point).astype(np.float64)


# =============================================================================
# Per-token (dynamic) activations
# =============================================================================


def per_token_quantize(acts: np.ndarray, bits: int) -> TokenQuantization:
    """
    Quantize every token row independently.

    Args:
        acts: Activations shaped (..., C); leading axes are flattened into tokens
        bits: Activation bit width

    Returns:
        TokenQuantization with one (s, z) per token
    """
    bits = check_bits(bits)
    acts = _finite(acts, "activation batch")
    rows = acts.reshape(-1, acts.shape[-1])
    qmax = 2**bits - 1
    scale, zero = _range_params(rows.min(axis=1), rows.max(axis=1), qmax)
    codes = np.clip(round_half_away(rows / scale[:, None]) - zero[:, None], 0, qmax)
    return TokenQuantization(
        codes=codes.astype(np.int32),
        scales=scale,
        zero_points=zero.astype(np.int64),
        bits=bits,
    )


def per_token_dequantize(quant: TokenQuantization) -> np.ndarray:
    """Reconstruct tokens x C activations."""
    shifted = (quant.codes.astype(np.int64) + quant.zero_points[:, None]).astype(np.float64)
    return quant.scales[:, None] * shifted


def per_token_mse(acts: np.ndarray, bits: int) -> float:
    """Mean squared round-trip error of per-token quantization."""
    rows = np.asarray(acts, dtype=np.float64).reshape(-1, np.shape(acts)[-1])
    diff = per_token_dequantize(per_token_quantize(rows, bits)) - rows
    return float(np.mean(diff * diff))


# =============================================================================
# Per-channel (static) weights
# =============================================================================


def uniform_quantize_rows(weights: np.ndarray, bits: int) -> UniformArtifact:
    """
    Per-output-channel quantization of a weight matrix.

    Scales are rounded to float32 before the codes are computed, so the saved
    artifact dequantizes to exactly the values measured here.
    """
    bits = check_bits(bits)
    weights = _finite(weights, "weight matrix")
    if weights.ndim != 2:
        raise QuantizationError(f"weight matrix must be 2-D, got shape {weights.shape}")
    qmax = 2**bits - 1
    scale, _ = _range_params(weights.min(axis=1), weights.max(axis=1), qmax)
    scale32 = scale.astype(np.float32)
    s = scale32.astype(np.float64)
    zero = round_half_away(weights.min(axis=1) / s)
    if np.any(np.abs(zero) > INT32_MAX):
        row = int(np.argmax(np.abs(zero)))
        raise QuantizationError(
            f"row {row}: zero point {zero[row]:.0f} does not fit an int32 artifact"
        )
    codes = np.clip(round_half_away(weights / s[:, None]) - zero[:, None], 0, qmax)
    logger.debug("uniform per-channel: %d rows at %d bits", weights.shape[0], bits)
    return UniformArtifact(
        codes=codes.astype(np.int32),
        scales=scale32,
        zero_points=zero.astype(np.int32),
        bits=bits,
    )


def uniform_dequantize_rows(artifact: UniformArtifact) -> np.ndarray:
    """Float64 reconstruction of a per-channel uniform artifact."""
    qmax = 2**artifact.bits - 1
    codes = artifact.codes.astype(np.int64)
    if codes.size and (codes.min() < 0 or codes.max() > qmax):
        raise QuantizationError(f"code outside [0, {qmax}] in uniform artifact")
    shifted = (codes + artifact.zero_points.astype(np.int64)[:, None]).astype(np.float64)
    return artifact.scales.astype(np.float64)[:, None] * shifted


class UniformWeightQuantizer(BaseWeightQuantizer):
    """Per-channel asymmetric uniform quantization."""

    @property
    def name(self) -> str:
        return "uniform"

    @property
    def description(self) -> str:
        return "Per-channel static uniform quantization (one scale and zero point per row)"

    def quantize(self, weights: np.ndarray, bits: int) -> UniformArtifact:
        return uniform_quantize_rows(weights, bits)

    def dequantize(self, artifact: BaseArtifact) -> np.ndarray:
        if not isinstance(artifact, UniformArtifact):
            raise QuantizationError(f"expected a uniform artifact, got {artifact.artifact_kind}")
        return uniform_dequantize_rows(artifact)
