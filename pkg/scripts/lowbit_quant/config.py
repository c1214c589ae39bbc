"""Quantization configuration: defaults, JSON config files and overrides."""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from lowbit_quant.errors import ConfigError
from lowbit_quant.models import RotationMode, Scheme

CONFIG_ENV_VAR = "LRQ_CONFIG"

DEFAULT_SKIP_LAYERS = (
    "embed",
    "norm_out",
    "proj_out",
    "adaln_single",
    "caption_projection",
)


@dataclass(frozen=True)
class ClipGrid:
    """Candidate clip factors: start, start + step, ..., stop (inclusive)."""

    start: float = 0.85
    stop: float = 1.0
    step: float = 0.01

    def __post_init__(self):
        if not (0.0 < self.start <= self.stop <= 1.0):
            raise ConfigError(
                f"clip grid needs 0 < start <= stop <= 1, got {self.start}..{self.stop}"
            )
        if self.step <= 0.0:
            raise ConfigError(f"clip grid step must be positive, got {self.step}")

    def values(self) -> list[float]:
        """Grid values in ascending order, rounded to 10 decimals."""
        count = int(round((self.stop - self.start) / self.step)) + 1
        values = [round(self.start + k * self.step, 10) for k in range(count)]
        return [v for v in values if v <= self.stop + 1e-12]

    @classmethod
    def from_dict(cls, data: dict[str, float]) -> "ClipGrid":
        unknown = set(data) - {"start", "stop", "step"}
        if unknown:
            raise ConfigError(f"unknown clip grid key(s): {', '.join(sorted(unknown))}")
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class PairGrid:
    """Explicit (alpha, beta) candidates for the clip search."""

    alphas: tuple[float, ...]
    betas: tuple[float, ...]

    @classmethod
    def from_grids(cls, alpha: ClipGrid, beta: ClipGrid) -> "PairGrid":
        return cls(tuple(alpha.values()), tuple(beta.values()))

    @classmethod
    def default(cls) -> "PairGrid":
        """The 16 x 16 grid of the default ClipGrid on both sides."""
        return cls.from_grids(ClipGrid(), ClipGrid())

    @classmethod
    def single(cls, alpha: float = 1.0, beta: float = 1.0) -> "PairGrid":
        return cls((alpha,), (beta,))

    def pairs(self) -> list[tuple[float, float]]:
        return [(a, b) for a in self.alphas for b in self.betas]

    def __len__(self) -> int:
        return len(self.alphas) * len(self.betas)


@dataclass(frozen=True)
class QuantConfig:
    """All knobs of the calibration / quantization / simulation pipeline."""

    bits_w: int = 3
    bits_a: int = 4
    scheme: Scheme = Scheme.TLQ
    rotation_mode: RotationMode = RotationMode.ADAPTIVE
    threshold: float = 1.0
    migration_strength: float = 0.5
    shift_precision: int = 7
    clip_alpha: ClipGrid = field(default_factory=ClipGrid)
    clip_beta: ClipGrid = field(default_factory=ClipGrid)
    block_size: int = 128
    steps_k: int = 16
    skip_layers: tuple[str, ...] = DEFAULT_SKIP_LAYERS
    calib_batches: int = 8

    def __post_init__(self):
        if not 2 <= self.bits_w <= 8:
            raise ConfigError(f"bits_w must be in [2, 8], got {self.bits_w}")
        if not 2 <= self.bits_a <= 16:
            raise ConfigError(f"bits_a must be in [2, 16], got {self.bits_a}")
        if not 0.0 <= self.migration_strength <= 1.0:
            raise ConfigError(
                f"migration_strength must be in [0, 1], got {self.migration_strength}"
            )
        if self.shift_precision < 1:
            raise ConfigError(f"shift_precision must be >= 1, got {self.shift_precision}")
        if self.block_size < 1 or self.block_size & (self.block_size - 1):
            raise ConfigError(f"block_size must be a power of two, got {self.block_size}")
        if self.steps_k < 0:
            raise ConfigError(f"steps_k must be >= 0, got {self.steps_k}")
        if self.calib_batches < 1:
            raise ConfigError(f"calib_batches must be >= 1, got {self.calib_batches}")
        if not np.isfinite(self.threshold):
            raise ConfigError(f"threshold must be finite, got {self.threshold}")

    @property
    def clip_grid(self) -> PairGrid:
        return PairGrid.from_grids(self.clip_alpha, self.clip_beta)

    @property
    def activation_passthrough(self) -> bool:
        """A16 and above: activations are not quantized."""
        return self.bits_a >= 16

    def is_skipped(self, layer_name: str) -> bool:
        """Substring match against the full-precision skip list."""
        return any(pattern and pattern in layer_name for pattern in self.skip_layers)

    def with_overrides(self, **overrides: Any) -> "QuantConfig":
        """Return a copy with keys replaced (values coerced like from_dict)."""
        merged = self.to_dict()
        merged.update(overrides)
        return QuantConfig.from_dict(merged)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["scheme"] = self.scheme.value
        data["rotation_mode"] = self.rotation_mode.value
        data["skip_layers"] = list(self.skip_layers)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "QuantConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        values: dict[str, Any] = {}
        try:
            for key, value in data.items():
                if key == "scheme":
                    values[key] = value if isinstance(value, Scheme) else Scheme(value)
                elif key == "rotation_mode":
                    values[key] = (
                        value if isinstance(value, RotationMode) else RotationMode(value)
                    )
                elif key in ("clip_alpha", "clip_beta"):
                    values[key] = value if isinstance(value, ClipGrid) else ClipGrid.from_dict(value)
                elif key == "skip_layers":
                    values[key] = tuple(str(v) for v in value)
                elif key in ("threshold", "migration_strength"):
                    values[key] = float(value)
                else:
                    values[key] = int(value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid value for '{key}': {e}") from e
        return cls(**values)

    @classmethod
    def from_file(cls, path: Path) -> "QuantConfig":
        return cls.from_dict(read_config_file(path))


def read_config_file(path: Path) -> dict[str, Any]:
    """Raw key/value object of a JSON config file."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def load_config(
    path: Path | None = None,
    overrides: dict[str, Any] | None = None,
    base: QuantConfig | None = None,
) -> QuantConfig:
    """
    Build the effective configuration.

    Precedence: base (dataclass defaults when omitted) < config file <
    overrides. When path is None the file named by $LRQ_CONFIG is used, if set.
    """
    if path is None:
        env_path = os.environ.get(CONFIG_ENV_VAR)
        path = Path(env_path) if env_path else None
    config = base if base is not None else QuantConfig()
    if path is not None:
        config = config.with_overrides(**read_config_file(path))
    if overrides:
        config = config.with_overrides(**overrides)
    return config


def default_help_values() -> dict[str, str]:
    """Default value of every config key, formatted for --help."""
    defaults = QuantConfig().to_dict()
    out = {}
    for key, value in defaults.items():
        if isinstance(value, dict):
            value = f"{value['start']}:{value['stop']}:{value['step']}"
        elif isinstance(value, list):
            value = ",".join(value)
        out[key] = str(value)
    return out


__all__ = [
    "CONFIG_ENV_VAR",
    "DEFAULT_SKIP_LAYERS",
    "ClipGrid",
    "PairGrid",
    "QuantConfig",
    "load_config",
    "read_config_file",
    "default_help_values",
]
