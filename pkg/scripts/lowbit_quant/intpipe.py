"""
Shift-based integer execution of twin-log layers.

Every non-zero weight exponent e = s * (q + z) is split into an integer part
f = floor(e) and a residual r = e - f in [0, 1). The residual factor 2^r is
rounded onto a 2^-I grid, giving the integer I^r = round(2^r * 2^I) in
[2^I, 2^(I+1)], so that

    w ~= sign * I^r * 2^(f - I)

A matmul against integer activation codes then needs only shifts and adds.
Rows are aligned to their smallest exponent so the whole row accumulates in
one exact integer; the per-token activation scale is applied once at the end.
"""

import logging

import numpy as np

from lowbit_quant.errors import AccumulatorOverflowError, DimensionMismatchError
from lowbit_quant.models import (
    ShiftArtifact,
    ShiftConfig,
    TokenQuantization,
    TwinLogArtifact,
    UniformArtifact,
)
from lowbit_quant.quantizers.uniform import round_half_away

logger = logging.getLogger(__name__)

ACCUMULATOR_BITS = 128
INT64_SAFE = 2.0**61  # float bound below which int64 accumulation cannot overflow


def integerize(artifact: TwinLogArtifact, config: ShiftConfig | None = None) -> ShiftArtifact:
    """Decompose twin-log codes into integer exponents and integerized residuals."""
    config = config or ShiftConfig()
    artifact.check()
    i = config.shift_precision
    p = artifact.params
    codes = artifact.codes.astype(np.int64)
    m_pos, m_neg = artifact.masks.m_pos, artifact.masks.m_neg

    e_pos = p.s_pos.astype(np.float64)[:, None] * (codes + p.z_pos.astype(np.int64)[:, None])
    e_neg = p.s_neg.astype(np.float64)[:, None] * (codes + p.z_neg.astype(np.int64)[:, None])
    exponent = np.where(m_pos, e_pos, np.where(m_neg, e_neg, 0.0))

    whole = np.floor(exponent)
    residual = exponent - whole
    live = m_pos | m_neg
    integerized = round_half_away(np.ldexp(np.exp2(residual), i))

    return ShiftArtifact(
        exponents=np.where(live, whole, 0).astype(np.int32),
        residuals=np.where(live, integerized, 0).astype(np.int32),
        masks=artifact.masks,
        config=config,
    )


def residual_error_bound(config: ShiftConfig | None = None) -> float:
    """Worst relative error of the integerized residual factor, 2^(-I-1)."""
    config = config or ShiftConfig()
    return 2.0 ** (-config.shift_precision - 1)


def _signs(artifact: ShiftArtifact) -> np.ndarray:
    return artifact.masks.m_pos.astype(np.int64) - artifact.masks.m_neg.astype(np.int64)


def shift_weights(artifact: ShiftArtifact) -> np.ndarray:
    """Dense float64 weights the integer core actually multiplies by."""
    i = artifact.config.shift_precision
    magnitude = np.ldexp(
        artifact.residuals.astype(np.float64),
        (artifact.exponents.astype(np.int64) - i).astype(np.int32),
    )
    return _signs(artifact) * magnitude


def _aligned_weights(artifact: ShiftArtifact) -> tuple[np.ndarray, np.ndarray]:
    """Integer weights sign * I^r << (f - I - e_min) and the per-row e_min."""
    i = artifact.config.shift_precision
    live = ~artifact.masks.m_zero
    shift_exp = artifact.exponents.astype(np.int64) - i
    big = np.iinfo(np.int64).max
    e_min = np.where(live, shift_exp, big).min(axis=1)
    e_min = np.where(e_min == big, 0, e_min)

    shifts = np.where(live, shift_exp - e_min[:, None], 0)
    residuals = artifact.residuals.astype(np.int64)
    signs = _signs(artifact)
    # I^r <= 2^(I+1), so the shifted value fits int64 while this stays below 62
    if int(shifts.max(initial=0)) + i + 1 < 62:
        weights = signs * (residuals << shifts)
    else:
        weights = signs.astype(object) * np.left_shift(residuals.astype(object), shifts.astype(object))
    return weights, e_min


def _accumulate(weights: np.ndarray, act: TokenQuantization) -> np.ndarray:
    """
    Exact acc[t, o] = sum_c W[o, c] * (q[t, c] + z_t).

    The zero point enters as z_t * rowsum(W[o]). Runs in int64 when a bound on
    |acc| proves it safe, otherwise in Python integers checked against a
    signed 128-bit accumulator.
    """
    if act.codes.shape[1] != weights.shape[1]:
        raise DimensionMismatchError(
            f"activations have {act.codes.shape[1]} channels, weights expect {weights.shape[1]}"
        )
    codes = act.codes.astype(np.int64)
    zeros = act.zero_points.astype(np.int64)
    act_peak = float(np.max(np.abs(codes), initial=0)) + float(np.max(np.abs(zeros), initial=0))
    row_mass = float(np.abs(weights).astype(np.float64).sum(axis=1).max(initial=0.0))
    bound = row_mass * max(act_peak, 1.0)

    if weights.dtype != object and bound < INT64_SAFE:
        rowsum = weights.sum(axis=1)
        return codes @ weights.T + zeros[:, None] * rowsum[None, :]

    logger.debug("accumulating in wide integers (bound %.3g)", bound)
    w = weights.astype(object)
    rowsum = w.sum(axis=1)
    acc = codes.astype(object) @ w.T + zeros.astype(object)[:, None] * rowsum[None, :]
    limit = 1 << (ACCUMULATOR_BITS - 1)
    peak = max((abs(v) for v in acc.ravel()), default=0)
    if peak >= limit:
        raise AccumulatorOverflowError(
            f"accumulator overflow: |acc| needs {int(peak).bit_length() + 1} bits, "
            f"limit is {ACCUMULATOR_BITS}"
        )
    return acc


def shift_accumulate(
    weights: ShiftArtifact, act: TokenQuantization
) -> tuple[np.ndarray, np.ndarray]:
    """
    Integer accumulator of the shift product and the per-row exponent offset.

    The output is acc[t, o] * 2^e_min[o] * s_t; acc holds Python integers
    when the sum does not fit int64.
    """
    aligned, e_min = _aligned_weights(weights)
    return _accumulate(aligned, act), e_min


def shift_matmul(weights: ShiftArtifact, act: TokenQuantization) -> np.ndarray:
    """
    Integer-only product of quantized activations and shift weights.

    Args:
        weights: Shift artifact, out x C
        act: Per-token quantized activations, tokens x C

    Returns:
        float64 output, tokens x out
    """
    acc, e_min = shift_accumulate(weights, act)
    exact = np.ldexp(acc.astype(np.float64), e_min.astype(np.int32)[None, :])
    return exact * act.scales[:, None]


def integer_matmul(weights: UniformArtifact, act: TokenQuantization) -> np.ndarray:
    """Integer core of the uniform scheme: (q_w + z_w)(q_x + z_x) * s_w * s_x."""
    shifted = weights.codes.astype(np.int64) + weights.zero_points.astype(np.int64)[:, None]
    acc = _accumulate(shifted, act)
    scale_w = weights.scales.astype(np.float64)
    return acc.astype(np.float64) * scale_w[None, :] * act.scales[:, None]


__all__ = [
    "integerize",
    "residual_error_bound",
    "shift_weights",
    "shift_accumulate",
    "shift_matmul",
    "integer_matmul",
]
