"""
Twin-log weight quantization.

Positive and negative weights are quantized separately in the log2 domain:

    u = log2|w|                 (per side, non-zero elements only)
    s+ = (log2(alpha * 2^max+) - min+) / (2^(b-1) - 1)      z+ = round(min+ / s+)
    s- = (log2(beta  * 2^max-) - min-) /  2^(b-1)           z- = round(min- / s-)
    q  = clamp(round(u / s) - z, 0, levels)
    w_f = +2^(s+ (q + z+)) on M+,  -2^(s- (q + z-)) on M-,  0 on M0

alpha and beta are picked per output channel by an exhaustive grid search
minimising the squared weight-space error of the row.
"""

import logging
import math

import numpy as np

from lowbit_quant.config import PairGrid
from lowbit_quant.errors import QuantizationError
from lowbit_quant.models import (
    BaseArtifact,
    ChannelQuantization,
    SignMasks,
    TwinLogArtifact,
    TwinLogParams,
)
from lowbit_quant.quantizers.base import BaseWeightQuantizer
from lowbit_quant.quantizers.uniform import check_bits, round_half_away

logger = logging.getLogger(__name__)

ZERO_EPSILON = 2.0**-30
MAX_BITS = 8  # negative codes reach 2^(b-1) and are stored as uint8
LOG_SCALE_FLOOR = 2.0**-16  # keeps z = round(min / s) inside int32


def build_sign_masks(weights: np.ndarray) -> SignMasks:
    """Split weights into positive, negative and (|w| < 2^-30) zero masks."""
    weights = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(weights)):
        raise QuantizationError("weights contain non-finite values")
    m_zero = np.abs(weights) < ZERO_EPSILON
    return SignMasks(
        m_pos=(weights > 0) & ~m_zero,
        m_neg=(weights < 0) & ~m_zero,
        m_zero=m_zero,
    )


def _check_clip(name: str, value: float) -> float:
    if not 0.0 < value <= 1.0:
        raise QuantizationError(f"clip factor {name} must be in (0, 1], got {value}")
    return float(value)


def log2_magnitude(x: np.ndarray) -> np.ndarray:
    """log2 of positive values, exact whenever x is a power of two."""
    mantissa, exponent = np.frexp(np.asarray(x, dtype=np.float64))
    return (exponent - 1).astype(np.float64) + np.log2(2.0 * mantissa)


def pow2(e: np.ndarray) -> np.ndarray:
    """2^e, exact whenever e is an integer."""
    e = np.asarray(e, dtype=np.float64)
    whole = np.floor(e)
    return np.ldexp(np.exp2(e - whole), whole.astype(np.int32))


def clipped_ceiling(logs: np.ndarray, clip: float) -> float:
    """log2(clip * max|w|) for one side's log magnitudes."""
    return float(logs.max()) + math.log2(clip)


def side_params(logs: np.ndarray, clip: float, levels: int) -> tuple[np.float32, int]:
    """
    Scale and zero point of one side.

    The clip factor scales the largest magnitude, so the clipped log ceiling
    is max + log2(clip) and never rises above max.

    Empty sides get (1, 0); a side whose clipped log range is not positive
    gets s = 1, z = round(min). Positive scales are floored at 2^-16.
    """
    if logs.size == 0:
        return np.float32(1.0), 0
    lo = float(logs.min())
    span = clipped_ceiling(logs, clip) - lo
    if span <= 0.0:
        return np.float32(1.0), int(round_half_away(lo))
    scale = np.float32(max(span / levels, LOG_SCALE_FLOOR))
    return scale, int(round_half_away(lo / np.float64(scale)))


def side_codes(logs: np.ndarray, scale: np.float32, zero: int, levels: int) -> np.ndarray:
    """Clamped log-domain codes of one side (int64)."""
    q = round_half_away(logs / np.float64(scale)) - zero
    return np.clip(q, 0, levels).astype(np.int64)


def side_magnitudes(codes: np.ndarray, scale: np.float32, zero: int) -> np.ndarray:
    """2^(s (q + z)) for one side."""
    return pow2(np.float64(scale) * (codes.astype(np.int64) + zero).astype(np.float64))


def squared_error(approx: np.ndarray, exact: np.ndarray) -> float:
    """Correctly rounded sum of squared differences."""
    diff = np.asarray(approx, dtype=np.float64) - np.asarray(exact, dtype=np.float64)
    return math.fsum((diff * diff).tolist())


def _row_logs(w_row: np.ndarray, masks: SignMasks) -> tuple[np.ndarray, np.ndarray]:
    return log2_magnitude(w_row[masks.m_pos]), log2_magnitude(-w_row[masks.m_neg])


def tlq_quantize_channel(
    w_row: np.ndarray,
    bits: int,
    alpha: float = 1.0,
    beta: float = 1.0,
    masks: SignMasks | None = None,
) -> ChannelQuantization:
    """
    Quantize one output channel with fixed clip factors.

    Args:
        w_row: Real vector (one weight row)
        bits: Bit width in [2, 8]
        alpha: Positive-side clip factor in (0, 1]
        beta: Negative-side clip factor in (0, 1]
        masks: Row masks, built from w_row when omitted
    """
    bits = check_bits(bits)
    if bits > MAX_BITS:
        raise QuantizationError(f"twin-log codes support at most {MAX_BITS} bits, got {bits}")
    alpha = _check_clip("alpha", alpha)
    beta = _check_clip("beta", beta)
    w_row = np.asarray(w_row, dtype=np.float64).ravel()
    if masks is None:
        masks = build_sign_masks(w_row)

    pos_levels, neg_levels = 2 ** (bits - 1) - 1, 2 ** (bits - 1)
    u_pos, u_neg = _row_logs(w_row, masks)
    s_pos, z_pos = side_params(u_pos, alpha, pos_levels)
    s_neg, z_neg = side_params(u_neg, beta, neg_levels)

    codes = np.zeros(w_row.shape, dtype=np.uint8)
    codes[masks.m_pos] = side_codes(u_pos, s_pos, z_pos, pos_levels)
    codes[masks.m_neg] = side_codes(u_neg, s_neg, z_neg, neg_levels)
    return ChannelQuantization(
        codes=codes,
        masks=masks,
        bits=bits,
        s_pos=s_pos,
        s_neg=s_neg,
        z_pos=z_pos,
        z_neg=z_neg,
        alpha=alpha,
        beta=beta,
    )


def tlq_dequantize_channel(channel: ChannelQuantization) -> np.ndarray:
    """Float64 reconstruction of one channel; zero-mask elements are exactly 0."""
    masks = channel.masks
    out = np.zeros(channel.codes.shape, dtype=np.float64)
    out[masks.m_pos] = side_magnitudes(channel.codes[masks.m_pos], channel.s_pos, channel.z_pos)
    out[masks.m_neg] = -side_magnitudes(channel.codes[masks.m_neg], channel.s_neg, channel.z_neg)
    return out


def clip_grid_search(
    w_row: np.ndarray,
    bits: int,
    grid: PairGrid | None = None,
    masks: SignMasks | None = None,
) -> tuple[float, float]:
    """
    Exhaustive search for the clip pair with the smallest squared row error.

    Each side's dequantized values only depend on its own factor, so they are
    computed once per grid value and combined for every pair. Ties go to the
    lexicographically largest (alpha, beta).

    Returns:
        (alpha, beta)
    """
    bits = check_bits(bits)
    grid = PairGrid.default() if grid is None else grid
    if len(grid) == 0:
        raise QuantizationError("clip grid is empty")
    w_row = np.asarray(w_row, dtype=np.float64).ravel()
    if masks is None:
        masks = build_sign_masks(w_row)

    pos_levels, neg_levels = 2 ** (bits - 1) - 1, 2 ** (bits - 1)
    u_pos, u_neg = _row_logs(w_row, masks)

    def side_values(logs: np.ndarray, clip: float, levels: int) -> np.ndarray:
        scale, zero = side_params(logs, _check_clip("clip", clip), levels)
        return side_magnitudes(side_codes(logs, scale, zero, levels), scale, zero)

    pos_cache = {a: side_values(u_pos, a, pos_levels) for a in grid.alphas}
    neg_cache = {b: -side_values(u_neg, b, neg_levels) for b in grid.betas}

    best: tuple[float, float] | None = None
    best_err = math.inf
    row = np.zeros_like(w_row)
    for alpha in sorted(set(grid.alphas), reverse=True):
        row[masks.m_pos] = pos_cache[alpha]
        for beta in sorted(set(grid.betas), reverse=True):
            row[masks.m_neg] = neg_cache[beta]
            err = squared_error(row, w_row)
            if err < best_err:
                best, best_err = (alpha, beta), err
    return best


def tlq_quantize_matrix(
    weights: np.ndarray, bits: int, grid: PairGrid | None = None
) -> TwinLogArtifact:
    """
    Per-output-channel twin-log quantization with clip search.

    Masks are built once for the whole matrix; every row then runs its own
    grid search and is quantized at the winning pair.
    """
    bits = check_bits(bits)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise QuantizationError(f"weight matrix must be 2-D, got shape {weights.shape}")
    masks = build_sign_masks(weights)
    rows = weights.shape[0]

    codes = np.zeros(weights.shape, dtype=np.uint8)
    s_pos = np.empty(rows, dtype=np.float32)
    s_neg = np.empty(rows, dtype=np.float32)
    z_pos = np.empty(rows, dtype=np.int32)
    z_neg = np.empty(rows, dtype=np.int32)
    alphas = np.empty(rows, dtype=np.float32)
    betas = np.empty(rows, dtype=np.float32)

    for i in range(rows):
        row_masks = masks.row(i)
        alpha, beta = clip_grid_search(weights[i], bits, grid, row_masks)
        ch = tlq_quantize_channel(weights[i], bits, alpha, beta, row_masks)
        codes[i] = ch.codes
        s_pos[i], s_neg[i] = ch.s_pos, ch.s_neg
        z_pos[i], z_neg[i] = ch.z_pos, ch.z_neg
        alphas[i], betas[i] = alpha, beta

    logger.debug("twin-log: %d rows at %d bits", rows, bits)
    params = TwinLogParams(
        bits=bits,
        s_pos=s_pos,
        s_neg=s_neg,
        z_pos=z_pos,
        z_neg=z_neg,
        clip_alpha=alphas,
        clip_beta=betas,
    )
    return TwinLogArtifact(codes=codes, masks=masks, params=params)


def tlq_dequantize(artifact: TwinLogArtifact) -> np.ndarray:
    """Float64 reconstruction of a whole artifact (checked for consistency first)."""
    artifact.check()
    p = artifact.params
    codes = artifact.codes.astype(np.int64)
    pos = pow2(
        p.s_pos.astype(np.float64)[:, None] * (codes + p.z_pos.astype(np.int64)[:, None])
    )
    neg = pow2(
        p.s_neg.astype(np.float64)[:, None] * (codes + p.z_neg.astype(np.int64)[:, None])
    )
    out = np.zeros(codes.shape, dtype=np.float64)
    out[artifact.masks.m_pos] = pos[artifact.masks.m_pos]
    out[artifact.masks.m_neg] = -neg[artifact.masks.m_neg]
    return out


class TwinLogWeightQuantizer(BaseWeightQuantizer):
    """Twin-log quantization with per-channel clip search."""

    def __init__(self, grid: PairGrid | None = None):
        self.grid = PairGrid.default() if grid is None else grid

    @property
    def name(self) -> str:
        return "tlq"

    @property
    def description(self) -> str:
        return "Twin-log quantization: separate log2 quantizers for positive and negative weights"

    def quantize(self, weights: np.ndarray, bits: int) -> TwinLogArtifact:
        return tlq_quantize_matrix(weights, bits, self.grid)

    def dequantize(self, artifact: BaseArtifact) -> np.ndarray:
        if not isinstance(artifact, TwinLogArtifact):
            raise QuantizationError(f"expected a twinlog artifact, got {artifact.artifact_kind}")
        return tlq_dequantize(artifact)
