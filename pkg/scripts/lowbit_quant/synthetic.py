"""
Seeded synthetic tensors.

All generators use numpy's Philox counter-based bit generator so a given seed
produces the same bytes on every platform.
"""

import numpy as np

from lowbit_quant.errors import ConfigError
from lowbit_quant.models import ActivationSpec, SyntheticSpec


def make_rng(seed: int) -> np.random.Generator:
    """Philox-backed generator for a seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _check_weight_spec(spec: SyntheticSpec) -> None:
    if spec.rows < 1 or spec.cols < 1:
        raise ConfigError(f"synthetic weights need positive dims, got {spec.rows}x{spec.cols}")
    if spec.sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {spec.sigma}")
    if not 0.0 <= spec.tail_fraction <= 1.0:
        raise ConfigError(f"tail_fraction must be in [0, 1], got {spec.tail_fraction}")
    if spec.tail_scale < 1.0:
        raise ConfigError(f"tail_scale must be >= 1, got {spec.tail_scale}")


def gen_gaussian_longtail(spec: SyntheticSpec) -> np.ndarray:
    """
    Gaussian weight matrix with a long tail.

    Every element is drawn from N(0, sigma^2); a tail_fraction subset is then
    multiplied by tail_scale. The normals are drawn before the tail mask, so
    tail_scale=1 and tail_fraction=0 give the same matrix for a seed.

    Returns:
        float32 matrix, rows x cols
    """
    _check_weight_spec(spec)
    rng = make_rng(spec.seed)
    shape = (spec.rows, spec.cols)
    weights = rng.standard_normal(shape) * spec.sigma
    tail = rng.random(shape) < spec.tail_fraction
    weights[tail] *= spec.tail_scale
    return weights.astype(np.float32)


def gen_activation_batch(spec: ActivationSpec) -> np.ndarray:
    """
    Calibration-style activation batch, B x N x C float32.

    The bulk is N(0, sigma^2). A mild_fraction of values is pushed into
    (5, 10] keeping its sign, and every salient channel is overwritten with
    values in [0.9, 1.0] x salient_peak.
    """
    if min(spec.batches, spec.tokens, spec.channels) < 1:
        raise ConfigError(
            f"activation batch needs positive dims, got "
            f"{spec.batches}x{spec.tokens}x{spec.channels}"
        )
    if not 0.0 <= spec.mild_fraction <= 1.0:
        raise ConfigError(f"mild_fraction must be in [0, 1], got {spec.mild_fraction}")
    for channel in spec.salient_channels:
        if not 0 <= channel < spec.channels:
            raise ConfigError(f"salient channel {channel} outside [0, {spec.channels})")

    rng = make_rng(spec.seed)
    shape = (spec.batches, spec.tokens, spec.channels)
    acts = rng.standard_normal(shape) * spec.sigma

    mild = rng.random(shape) < spec.mild_fraction
    magnitudes = 10.0 - rng.uniform(0.0, 5.0, size=shape)  # (5, 10]
    acts[mild] = np.where(acts[mild] < 0, -1.0, 1.0) * magnitudes[mild]

    for channel in spec.salient_channels:
        acts[..., channel] = spec.salient_peak * rng.uniform(0.9, 1.0, size=shape[:2])

    return acts.astype(np.float32)
