"""
Adaptive rotation of activation outliers.

Layers whose calibration activations fluctuate little (J below a threshold)
get a block Hadamard rotation. Layers with salient outliers get the dual
transform R1 -> P -> R2: a greedy outlier-aware rotation, a zigzag channel
permutation balancing ranges across blocks, then a second greedy rotation.
Every transform T is orthogonal, so (X T)(W T)^T == X W^T.
"""

import logging

import numpy as np

from lowbit_quant.config import QuantConfig
from lowbit_quant.errors import CalibrationError, DimensionMismatchError, UnsupportedDimensionError
from lowbit_quant.models import (
    LayerStats,
    RotationKind,
    RotationMode,
    RotationPlan,
    Side,
    SmoothingVector,
)

logger = logging.getLogger(__name__)

SMOOTHING_FLOOR = 1e-5


def _tokens(acts: np.ndarray) -> np.ndarray:
    """Flatten (..., C) activations to tokens x C float64."""
    acts = np.asarray(acts, dtype=np.float64)
    if acts.size == 0:
        raise CalibrationError("activation batch is empty")
    return acts.reshape(-1, acts.shape[-1])


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


# =============================================================================
# Fluctuation metric
# =============================================================================


def compute_J(acts: np.ndarray) -> LayerStats:
    """
    J = ||X||_F / sqrt(B N C) and the outlier profile of a batch.

    Accepts B x N x C or tokens x C (treated as B = 1).
    """
    acts = np.asarray(acts, dtype=np.float64)
    if acts.size == 0:
        raise CalibrationError("activation batch is empty")
    if acts.ndim == 2:
        acts = acts[None]
    if acts.ndim != 3:
        raise DimensionMismatchError(f"activations must be B x N x C, got shape {acts.shape}")
    batch, tokens, channels = acts.shape
    magnitude = np.abs(acts)
    return LayerStats(
        J=float(np.sqrt(np.sum(acts * acts) / acts.size)),
        batch=batch,
        tokens=tokens,
        channels=channels,
        channel_max_abs=magnitude.reshape(-1, channels).max(axis=0),
        frac_gt_5=float(np.mean(magnitude > 5)),
        frac_gt_10=float(np.mean(magnitude > 10)),
        frac_gt_100=float(np.mean(magnitude > 100)),
        peak=float(magnitude.max()),
    )


# =============================================================================
# Hadamard
# =============================================================================


def hadamard_matrix(n: int) -> np.ndarray:
    """Normalized Sylvester Hadamard matrix of a power-of-two order."""
    if not _is_power_of_two(n):
        raise UnsupportedDimensionError(
            f"no Hadamard matrix of order {n} (not a power of two); use block_hadamard"
        )
    h = np.ones((1, 1))
    base = np.array([[1.0, 1.0], [1.0, -1.0]])
    while h.shape[0] < n:
        h = np.kron(h, base)
    return h / np.sqrt(n)


def block_partition(channels: int, block_size: int) -> list[tuple[int, int]]:
    """
    (start, size) blocks covering the channels.

    Full block_size blocks first; the remainder is split into powers of two,
    largest first.
    """
    if channels < 1:
        raise DimensionMismatchError(f"channel count must be positive, got {channels}")
    if not _is_power_of_two(block_size):
        raise UnsupportedDimensionError(f"block size {block_size} is not a power of two")
    blocks = []
    start = 0
    while channels - start >= block_size:
        blocks.append((start, block_size))
        start += block_size
    rest = channels - start
    while rest:
        size = 1 << (rest.bit_length() - 1)
        blocks.append((start, size))
        start += size
        rest -= size
    return blocks


def block_hadamard(channels: int, block_size: int) -> np.ndarray:
    """Block-diagonal Hadamard rotation for any channel count."""
    r = np.zeros((channels, channels))
    for start, size in block_partition(channels, block_size):
        r[start : start + size, start : start + size] = hadamard_matrix(size)
    return r


# =============================================================================
# Greedy rotation and zigzag permutation
# =============================================================================


def _swap(n: int, c: int) -> np.ndarray:
    """Permutation matrix exchanging channels 0 and c."""
    e = np.eye(n)
    e[[0, c]] = e[[c, 0]]
    return e


def greedy_block_rotation(block: np.ndarray, steps_k: int) -> tuple[np.ndarray, list[float]]:
    """
    Greedy rotation of one block.

    Each step swaps the channel with the largest max-abs into position 0,
    spreads it with a Hadamard matrix and swaps back (R_i = E H E). A step is
    kept only if the block's max-abs strictly drops; the first rejected step
    ends the search.

    Args:
        block: tokens x n slice of the calibration activations
        steps_k: Maximum number of steps

    Returns:
        (R, history) where history holds the initial max-abs followed by the
        max-abs after every accepted step
    """
    block = np.asarray(block, dtype=np.float64)
    n = block.shape[1]
    rotation = np.eye(n)
    if n == 1:
        return rotation, [float(np.max(np.abs(block)))]
    h = hadamard_matrix(n)
    current = block
    history = [float(np.max(np.abs(current)))]
    for _ in range(steps_k):
        c_star = int(np.argmax(np.max(np.abs(current), axis=0)))
        e = _swap(n, c_star)
        step = e @ h @ e
        candidate = current @ step
        peak = float(np.max(np.abs(candidate)))
        if not peak < history[-1]:
            break
        rotation = rotation @ step
        current = candidate
        history.append(peak)
    return rotation, history


def greedy_rotation(acts: np.ndarray, block_size: int, steps_k: int) -> np.ndarray:
    """Block-diagonal greedy rotation R^ over all channels."""
    tokens = _tokens(acts)
    channels = tokens.shape[1]
    r = np.zeros((channels, channels))
    for start, size in block_partition(channels, block_size):
        block_r, history = greedy_block_rotation(tokens[:, start : start + size], steps_k)
        r[start : start + size, start : start + size] = block_r
        logger.debug(
            "greedy block @%d (n=%d): %d step(s), max-abs %.4g -> %.4g",
            start, size, len(history) - 1, history[0], history[-1],
        )
    return r


def zigzag_permutation(acts: np.ndarray, block_size: int) -> np.ndarray:
    """
    Permutation spreading large-range channels across blocks.

    Channels are sorted by descending range (stable) and dealt to blocks in
    serpentine order 0..k-1, k-1..0, ..., skipping full blocks. When every
    range is equal the identity is returned.

    Returns:
        int32 perm; new position j holds original channel perm[j]
    """
    tokens = _tokens(acts)
    channels = tokens.shape[1]
    ranges = tokens.max(axis=0) - tokens.min(axis=0)
    if np.all(ranges == ranges[0]):
        return np.arange(channels, dtype=np.int32)

    blocks = block_partition(channels, block_size)
    k = len(blocks)
    members: list[list[int]] = [[] for _ in range(k)]
    order = np.argsort(-ranges, kind="stable")
    serpentine = list(range(k)) + list(range(k - 1, -1, -1))
    position = 0
    for channel in order:
        while True:
            b = serpentine[position % len(serpentine)]
            position += 1
            if len(members[b]) < blocks[b][1]:
                members[b].append(int(channel))
                break

    perm = np.empty(channels, dtype=np.int32)
    for (start, size), chans in zip(blocks, members):
        perm[start : start + size] = chans
    return perm


def permutation_matrix(perm: np.ndarray) -> np.ndarray:
    """0/1 matrix P with X @ P == X[:, perm]."""
    n = len(perm)
    p = np.zeros((n, n))
    p[np.asarray(perm), np.arange(n)] = 1.0
    return p


def build_dual_transform(
    acts: np.ndarray, block_size: int, steps_k: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    R1 from the raw batch, P from X R1, R2 from X R1 P.

    Rotations are rounded to float32 before being used downstream, so the
    stored plan is exactly what produced the later stages.
    """
    tokens = _tokens(acts)
    r1 = greedy_rotation(tokens, block_size, steps_k).astype(np.float32)
    rotated = tokens @ r1.astype(np.float64)
    perm = zigzag_permutation(rotated, block_size)
    r2 = greedy_rotation(rotated[:, perm], block_size, steps_k).astype(np.float32)
    return r1, perm, r2


# =============================================================================
# Plans
# =============================================================================


def _hadamard_plan(channels: int, config: QuantConfig, stats: LayerStats | None) -> RotationPlan:
    return RotationPlan(
        kind=RotationKind.HADAMARD,
        channels=channels,
        block_size=config.block_size,
        threshold=config.threshold,
        J=stats.J if stats else None,
        r1=block_hadamard(channels, config.block_size).astype(np.float32),
    )


def _dual_plan(
    acts: np.ndarray, config: QuantConfig, stats: LayerStats | None
) -> RotationPlan:
    r1, perm, r2 = build_dual_transform(acts, config.block_size, config.steps_k)
    return RotationPlan(
        kind=RotationKind.DUAL,
        channels=len(perm),
        block_size=config.block_size,
        threshold=config.threshold,
        J=stats.J if stats else None,
        r1=r1,
        perm=perm,
        r2=r2,
    )


def select_rotation_plan(
    stats: LayerStats, threshold: float, acts: np.ndarray, config: QuantConfig
) -> RotationPlan:
    """J < threshold -> block Hadamard; J >= threshold -> dual transform."""
    if stats.J < threshold:
        plan = _hadamard_plan(stats.channels, config, stats)
    else:
        plan = _dual_plan(acts, config, stats)
    plan.threshold = threshold
    logger.debug("J=%.4g threshold=%.4g -> %s", stats.J, threshold, plan.kind.value)
    return plan


def plan_for_mode(
    mode: RotationMode, stats: LayerStats, acts: np.ndarray, config: QuantConfig
) -> RotationPlan:
    """Plan for a rotation mode; only ADAPTIVE consults J."""
    if mode is RotationMode.NONE:
        plan = RotationPlan.identity(stats.channels, config.block_size)
        plan.J = stats.J
        return plan
    if mode is RotationMode.HADAMARD:
        return _hadamard_plan(stats.channels, config, stats)
    if mode is RotationMode.DUAL:
        return _dual_plan(acts, config, stats)
    return select_rotation_plan(stats, config.threshold, acts, config)


def apply_rotation(tensor: np.ndarray, plan: RotationPlan, side: Side) -> np.ndarray:
    """
    Apply a plan to activations (X T) or weights (W T).

    Both sides right-multiply by the composite T, so the layer product
    (X T)(W T)^T equals X W^T.
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.shape[-1] != plan.channels:
        raise DimensionMismatchError(
            f"{side.value} has {tensor.shape[-1]} channels, plan expects {plan.channels}"
        )
    transform = plan.composite()
    if transform is None:
        return tensor.copy()
    return tensor @ transform


def orthogonality_error(matrix: np.ndarray) -> float:
    """max |R R^T - I| (elementwise)."""
    m = np.asarray(matrix, dtype=np.float64)
    return float(np.max(np.abs(m @ m.T - np.eye(m.shape[0]))))


# =============================================================================
# Smoothing
# =============================================================================


def smooth_migrate(
    acts: np.ndarray, weights: np.ndarray, strength: float = 0.5
) -> tuple[SmoothingVector, np.ndarray, np.ndarray]:
    """
    Move quantization difficulty from activations to weights.

    d_j = max|X_j|^strength / max|W_j|^(1 - strength), both maxima floored at
    1e-5; X' = X / d and W' = W * d.

    Returns:
        (smoothing, X', W') with X' shaped like acts
    """
    if not 0.0 <= strength <= 1.0:
        raise CalibrationError(f"migration strength must be in [0, 1], got {strength}")
    acts = np.asarray(acts, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    tokens = _tokens(acts)
    if weights.ndim != 2 or weights.shape[1] != tokens.shape[1]:
        raise DimensionMismatchError(
            f"weights {weights.shape} do not match {tokens.shape[1]} activation channels"
        )
    act_max = np.maximum(np.abs(tokens).max(axis=0), SMOOTHING_FLOOR)
    weight_max = np.maximum(np.abs(weights).max(axis=0), SMOOTHING_FLOOR)
    factors = (act_max**strength / weight_max ** (1.0 - strength)).astype(np.float32)
    d = factors.astype(np.float64)
    smoothing = SmoothingVector(factors=factors, migration_strength=float(strength))
    return smoothing, acts / d, weights * d


def apply_smoothing(tensor: np.ndarray, smoothing: SmoothingVector, side: Side) -> np.ndarray:
    """X / d for activations, W * d for weights."""
    d = smoothing.factors.astype(np.float64)
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.shape[-1] != d.shape[0]:
        raise DimensionMismatchError(
            f"{side.value} has {tensor.shape[-1]} channels, smoothing has {d.shape[0]}"
        )
    return tensor / d if side is Side.ACTIVATION else tensor * d
