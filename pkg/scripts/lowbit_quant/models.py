"""Data models for lowbit_quant package."""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, ClassVar

import numpy as np

from lowbit_quant.errors import ArtifactConsistencyError, QuantizationError


class Granularity(Enum):
    """Granularity of uniform quantization parameters."""

    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"  # one (s, z) per output-channel row
    PER_TOKEN = "per_token"  # one (s, z) per token row, recomputed per call


class Scheme(Enum):
    """Weight quantization scheme."""

    UNIFORM = "uniform"
    TLQ = "tlq"


class RotationMode(Enum):
    """How a layer's rotation plan is chosen."""

    NONE = "none"
    HADAMARD = "hadamard"
    ADAPTIVE = "adaptive"  # dispatch on J
    DUAL = "dual"


class RotationKind(Enum):
    """Kind of transform stored in a RotationPlan."""

    IDENTITY = "identity"
    HADAMARD = "hadamard"
    DUAL = "dual"


class Side(Enum):
    """Which operand of X·Wᵀ a transform is applied to."""

    ACTIVATION = "activation"
    WEIGHT = "weight"


class BaseArtifact(ABC):
    """Abstract base class for anything tensorio can save and load."""

    artifact_kind: ClassVar[str]

    @abstractmethod
    def to_tensors(self) -> dict[str, np.ndarray]:
        """Return the array fields, keyed by tensor name."""
        pass

    @abstractmethod
    def to_attributes(self) -> dict[str, Any]:
        """Return the scalar fields as a JSON-serialisable dict."""
        pass

    @classmethod
    @abstractmethod
    def from_tensors(
        cls, tensors: dict[str, np.ndarray], attributes: dict[str, Any]
    ) -> "BaseArtifact":
        """Rebuild the artifact from what to_tensors/to_attributes produced."""
        pass


# =============================================================================
# Uniform quantization
# =============================================================================


@dataclass(frozen=True)
class UniformParams:
    """Parameters of one uniform quantizer: x_f = s * (x_q + z)."""

    bits: int
    scale: float
    zero_point: int
    granularity: Granularity = Granularity.PER_TENSOR

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1


@dataclass
class TokenQuantization:
    """Per-token dynamic quantization of an activation batch."""

    codes: np.ndarray  # int32, tokens x C
    scales: np.ndarray  # float64, (tokens,)
    zero_points: np.ndarray  # int64, (tokens,)
    bits: int

    @property
    def tokens(self) -> int:
        return self.codes.shape[0]

    def params(self, token: int) -> UniformParams:
        """Return the parameters used for one token row."""
        return UniformParams(
            bits=self.bits,
            scale=float(self.scales[token]),
            zero_point=int(self.zero_points[token]),
            granularity=Granularity.PER_TOKEN,
        )


@dataclass
class UniformArtifact(BaseArtifact):
    """Per-channel static uniform quantization of a weight matrix."""

    artifact_kind: ClassVar[str] = "uniform"

    codes: np.ndarray  # int32, out x in
    scales: np.ndarray  # float32, (out,)
    zero_points: np.ndarray  # int32, (out,)
    bits: int

    @property
    def original_dims(self) -> tuple[int, ...]:
        return tuple(self.codes.shape)

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {
            "codes": self.codes,
            "scales": self.scales,
            "zero_points": self.zero_points,
        }

    def to_attributes(self) -> dict[str, Any]:
        return {"bits": self.bits}

    @classmethod
    def from_tensors(cls, tensors, attributes) -> "UniformArtifact":
        return cls(
            codes=tensors["codes"],
            scales=tensors["scales"],
            zero_points=tensors["zero_points"],
            bits=int(attributes["bits"]),
        )


# =============================================================================
# Twin-log quantization
# =============================================================================


@dataclass
class SignMasks:
    """Positive / negative / zero position masks of a weight tensor."""

    m_pos: np.ndarray  # bool
    m_neg: np.ndarray  # bool
    m_zero: np.ndarray  # bool

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.m_pos.shape)

    def row(self, index: int) -> "SignMasks":
        """Masks of one output channel."""
        return SignMasks(self.m_pos[index], self.m_neg[index], self.m_zero[index])

    def check_partition(self) -> None:
        """Raise unless exactly one mask bit is set for every element."""
        if not (self.m_pos.shape == self.m_neg.shape == self.m_zero.shape):
            raise ArtifactConsistencyError(
                f"mask shapes differ: {self.m_pos.shape}, {self.m_neg.shape}, {self.m_zero.shape}"
            )
        total = (
            self.m_pos.astype(np.int8)
            + self.m_neg.astype(np.int8)
            + self.m_zero.astype(np.int8)
        )
        if not np.all(total == 1):
            bad = int(np.count_nonzero(total != 1))
            raise ArtifactConsistencyError(f"sign masks do not partition: {bad} element(s)")


@dataclass
class ChannelQuantization:
    """Twin-log codes and parameters of one output channel."""

    codes: np.ndarray  # uint8, (in,)
    masks: SignMasks  # 1-D masks
    bits: int
    s_pos: np.float32
    s_neg: np.float32
    z_pos: int
    z_neg: int
    alpha: float
    beta: float


@dataclass
class TwinLogParams:
    """Per-output-channel twin-log parameters."""

    bits: int
    s_pos: np.ndarray  # float32, (out,)
    s_neg: np.ndarray  # float32, (out,)
    z_pos: np.ndarray  # int32, (out,)
    z_neg: np.ndarray  # int32, (out,)
    clip_alpha: np.ndarray  # float32, (out,)
    clip_beta: np.ndarray  # float32, (out,)

    @property
    def pos_levels(self) -> int:
        """Largest positive-side code, 2^(b-1) - 1."""
        return 2 ** (self.bits - 1) - 1

    @property
    def neg_levels(self) -> int:
        """Largest negative-side code, 2^(b-1)."""
        return 2 ** (self.bits - 1)


@dataclass
class TwinLogArtifact(BaseArtifact):
    """Quantized form of one layer under twin-log quantization."""

    artifact_kind: ClassVar[str] = "twinlog"

    codes: np.ndarray  # uint8, out x in; meaning depends on the element's mask
    masks: SignMasks
    params: TwinLogParams

    @property
    def original_dims(self) -> tuple[int, ...]:
        return tuple(self.codes.shape)

    def channel(self, index: int) -> ChannelQuantization:
        """Return one output channel as a ChannelQuantization."""
        p = self.params
        return ChannelQuantization(
            codes=self.codes[index],
            masks=self.masks.row(index),
            bits=p.bits,
            s_pos=p.s_pos[index],
            s_neg=p.s_neg[index],
            z_pos=int(p.z_pos[index]),
            z_neg=int(p.z_neg[index]),
            alpha=float(p.clip_alpha[index]),
            beta=float(p.clip_beta[index]),
        )

    def check(self) -> None:
        """Raise ArtifactConsistencyError if masks, codes and params disagree."""
        self.masks.check_partition()
        if self.masks.shape != self.original_dims:
            raise ArtifactConsistencyError(
                f"mask shape {self.masks.shape} != code shape {self.original_dims}"
            )
        rows = self.original_dims[0]
        for name in ("s_pos", "s_neg", "z_pos", "z_neg", "clip_alpha", "clip_beta"):
            if getattr(self.params, name).shape != (rows,):
                raise ArtifactConsistencyError(f"params.{name} must have shape ({rows},)")
        codes = self.codes.astype(np.int64)
        if np.any(codes[self.masks.m_pos] > self.params.pos_levels):
            raise ArtifactConsistencyError("positive code above 2^(b-1)-1")
        if np.any(codes[self.masks.m_neg] > self.params.neg_levels):
            raise ArtifactConsistencyError("negative code above 2^(b-1)")
        if np.any(codes[self.masks.m_zero] != 0):
            raise ArtifactConsistencyError("zero-mask element with non-zero code")

    def to_tensors(self) -> dict[str, np.ndarray]:
        p = self.params
        return {
            "codes": self.codes,
            "m_pos": self.masks.m_pos,
            "m_neg": self.masks.m_neg,
            "m_zero": self.masks.m_zero,
            "s_pos": p.s_pos,
            "s_neg": p.s_neg,
            "z_pos": p.z_pos,
            "z_neg": p.z_neg,
            "clip_alpha": p.clip_alpha,
            "clip_beta": p.clip_beta,
        }

    def to_attributes(self) -> dict[str, Any]:
        return {"bits": self.params.bits}

    @classmethod
    def from_tensors(cls, tensors, attributes) -> "TwinLogArtifact":
        params = TwinLogParams(
            bits=int(attributes["bits"]),
            s_pos=tensors["s_pos"],
            s_neg=tensors["s_neg"],
            z_pos=tensors["z_pos"],
            z_neg=tensors["z_neg"],
            clip_alpha=tensors["clip_alpha"],
            clip_beta=tensors["clip_beta"],
        )
        masks = SignMasks(tensors["m_pos"], tensors["m_neg"], tensors["m_zero"])
        return cls(codes=tensors["codes"], masks=masks, params=params)


# =============================================================================
# Shift pipeline
# =============================================================================


@dataclass(frozen=True)
class ShiftConfig:
    """Integerization factor 2^-I of the shift pipeline."""

    shift_precision: int = 7

    def __post_init__(self):
        if int(self.shift_precision) < 1:
            raise QuantizationError(
                f"shift_precision must be >= 1, got {self.shift_precision}"
            )


@dataclass
class ShiftArtifact(BaseArtifact):
    """Hardware-executable form: w = sign * I^r * 2^(f - I)."""

    artifact_kind: ClassVar[str] = "shift"

    exponents: np.ndarray  # int32 f, out x in (0 where m_zero)
    residuals: np.ndarray  # int32 I^r in [2^I, 2^(I+1)] (0 where m_zero)
    masks: SignMasks
    config: ShiftConfig = field(default_factory=ShiftConfig)

    @property
    def original_dims(self) -> tuple[int, ...]:
        return tuple(self.exponents.shape)

    def check(self) -> None:
        """Raise ArtifactConsistencyError if residuals leave their range."""
        self.masks.check_partition()
        live = ~self.masks.m_zero
        i = self.config.shift_precision
        res = self.residuals[live].astype(np.int64)
        if res.size and (res.min() < 2**i or res.max() > 2 ** (i + 1)):
            raise ArtifactConsistencyError(
                f"residual integers outside [2^{i}, 2^{i + 1}]"
            )

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {
            "exponents": self.exponents,
            "residuals": self.residuals,
            "m_pos": self.masks.m_pos,
            "m_neg": self.masks.m_neg,
            "m_zero": self.masks.m_zero,
        }

    def to_attributes(self) -> dict[str, Any]:
        return {"shift_precision": self.config.shift_precision}

    @classmethod
    def from_tensors(cls, tensors, attributes) -> "ShiftArtifact":
        return cls(
            exponents=tensors["exponents"],
            residuals=tensors["residuals"],
            masks=SignMasks(tensors["m_pos"], tensors["m_neg"], tensors["m_zero"]),
            config=ShiftConfig(int(attributes["shift_precision"])),
        )


# =============================================================================
# Rotation
# =============================================================================


@dataclass
class LayerStats:
    """Fluctuation metric J and outlier profile of one activation batch."""

    J: float
    batch: int
    tokens: int
    channels: int
    channel_max_abs: np.ndarray  # (C,)
    frac_gt_5: float
    frac_gt_10: float
    frac_gt_100: float
    peak: float


@dataclass
class RotationPlan(BaseArtifact):
    """Per-layer transform: identity, block Hadamard, or dual (R1, P, R2)."""

    artifact_kind: ClassVar[str] = "rotation"

    kind: RotationKind
    channels: int
    block_size: int
    threshold: float | None = None
    J: float | None = None
    r1: np.ndarray | None = None  # float32 C x C (Hadamard plan keeps its matrix here)
    perm: np.ndarray | None = None  # int32 (C,): new position j holds old channel perm[j]
    r2: np.ndarray | None = None  # float32 C x C

    @classmethod
    def identity(cls, channels: int, block_size: int = 1) -> "RotationPlan":
        return cls(kind=RotationKind.IDENTITY, channels=channels, block_size=block_size)

    def composite(self) -> np.ndarray | None:
        """Full C x C transform T (float64), or None for identity."""
        if self.kind is RotationKind.IDENTITY:
            return None
        if self.kind is RotationKind.HADAMARD:
            return self.r1.astype(np.float64)
        t = self.r1.astype(np.float64)[:, self.perm]
        return t @ self.r2.astype(np.float64)

    def to_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.r1 is not None:
            out["r1"] = self.r1
        if self.perm is not None:
            out["perm"] = self.perm
        if self.r2 is not None:
            out["r2"] = self.r2
        return out

    def to_attributes(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "channels": self.channels,
            "block_size": self.block_size,
            "threshold": self.threshold,
            "J": self.J,
        }

    @classmethod
    def from_tensors(cls, tensors, attributes) -> "RotationPlan":
        return cls(
            kind=RotationKind(attributes["kind"]),
            channels=int(attributes["channels"]),
            block_size=int(attributes["block_size"]),
            threshold=attributes.get("threshold"),
            J=attributes.get("J"),
            r1=tensors.get("r1"),
            perm=tensors.get("perm"),
            r2=tensors.get("r2"),
        )


@dataclass
class SmoothingVector(BaseArtifact):
    """Per-input-channel migration factors d (X / d, W * d)."""

    artifact_kind: ClassVar[str] = "smoothing"

    factors: np.ndarray  # float32, (C,)
    migration_strength: float

    @classmethod
    def unit(cls, channels: int, migration_strength: float = 0.5) -> "SmoothingVector":
        return cls(np.ones(channels, dtype=np.float32), migration_strength)

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {"factors": self.factors}

    def to_attributes(self) -> dict[str, Any]:
        return {"migration_strength": self.migration_strength}

    @classmethod
    def from_tensors(cls, tensors, attributes) -> "SmoothingVector":
        return cls(tensors["factors"], float(attributes["migration_strength"]))


# =============================================================================
# Synthetic data and reporting
# =============================================================================


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian weights with a long tail: N(0, sigma^2), a subset scaled up."""

    rows: int
    cols: int
    sigma: float = 0.02
    tail_fraction: float = 0.01
    tail_scale: float = 8.0
    seed: int = 0


@dataclass(frozen=True)
class ActivationSpec:
    """Calibration-style activation batch with mild and salient outliers."""

    batches: int
    tokens: int
    channels: int
    sigma: float = 1.0
    salient_channels: tuple[int, ...] = ()
    salient_peak: float = 245.0
    mild_fraction: float = 0.0
    seed: int = 0


@dataclass
class LayerReport:
    """Error report of one simulated layer."""

    name: str
    plan_kind: str
    J: float = 0.0
    weight_error_uniform: float = 0.0
    weight_error_tlq: float = 0.0
    act_mse_pre: float = 0.0
    act_mse_post: float = 0.0
    peak: float = 0.0
    frac_gt_5: float = 0.0
    frac_gt_10: float = 0.0
    frac_gt_100: float = 0.0
    shift_max_deviation: float = 0.0
    output_error: float = 0.0
    skipped: bool = False

    COLUMNS: ClassVar[tuple[str, ...]] = (
        "name",
        "plan_kind",
        "J",
        "weight_error_uniform",
        "weight_error_tlq",
        "act_mse_pre",
        "act_mse_post",
        "peak",
        "frac_gt_5",
        "frac_gt_10",
        "frac_gt_100",
        "shift_max_deviation",
        "output_error",
        "skipped",
    )

    def as_row(self) -> dict[str, Any]:
        """Return the report as an ordered dict matching COLUMNS."""
        return {column: getattr(self, column) for column in self.COLUMNS}


@dataclass
class AblationRow:
    """One configuration of the TLQ x ARS ablation grid."""

    layer: str
    label: str  # "neither", "tlq", "ars", "tlq+ars"
    scheme: Scheme
    rotation_mode: RotationMode
    weight_error: float
    act_mse: float
    output_error: float

    COLUMNS: ClassVar[tuple[str, ...]] = (
        "layer",
        "label",
        "scheme",
        "rotation_mode",
        "weight_error",
        "act_mse",
        "output_error",
    )

    def as_row(self) -> dict[str, Any]:
        return {
            "layer": self.layer,
            "label": self.label,
            "scheme": self.scheme.value,
            "rotation_mode": self.rotation_mode.value,
            "weight_error": self.weight_error,
            "act_mse": self.act_mse,
            "output_error": self.output_error,
        }


@dataclass
class SweepRow:
    """Output error of one layer at one W/A bit setting."""

    layer: str
    setting: str  # e.g. "W3A4"
    bits_w: int
    bits_a: int
    scheme: Scheme
    weight_error: float
    output_error: float

    COLUMNS: ClassVar[tuple[str, ...]] = (
        "layer",
        "setting",
        "bits_w",
        "bits_a",
        "scheme",
        "weight_error",
        "output_error",
    )

    def as_row(self) -> dict[str, Any]:
        row = {column: getattr(self, column) for column in self.COLUMNS}
        row["scheme"] = self.scheme.value
        return row


@dataclass
class BenchmarkResult:
    """Twin-log vs uniform weight error over seeded synthetic matrices."""

    bits: int
    tlq_errors: list[float] = field(default_factory=list)
    uniform_errors: list[float] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.tlq_errors)

    @property
    def wins(self) -> int:
        return sum(t < u for t, u in zip(self.tlq_errors, self.uniform_errors))

    @property
    def win_fraction(self) -> float:
        return self.wins / self.count if self.count else 0.0

    @property
    def mean_error_ratio(self) -> float:
        """Mean twin-log error over mean uniform error; above 1 when uniform is ahead."""
        if not self.count:
            return 0.0
        return float(np.mean(self.tlq_errors) / np.mean(self.uniform_errors))

    @property
    def tlq_ahead(self) -> bool:
        return 2 * self.wins > self.count

    def to_dict(self) -> dict[str, Any]:
        return {
            "bits": self.bits,
            "count": self.count,
            "wins": self.wins,
            "win_fraction": self.win_fraction,
            "mean_error_ratio": self.mean_error_ratio,
            "tlq_errors": list(self.tlq_errors),
            "uniform_errors": list(self.uniform_errors),
        }


# =============================================================================
# Pipeline
# =============================================================================


@dataclass
class QuantizedLayer:
    """Everything calibration and quantization produced for one layer."""

    name: str
    weight: np.ndarray  # original float weights, out x in
    smoothing: SmoothingVector | None = None
    plan: RotationPlan | None = None
    stats: LayerStats | None = None
    folded: np.ndarray | None = None  # weights after smoothing and rotation
    artifact: BaseArtifact | None = None  # TwinLogArtifact or UniformArtifact
    shift: ShiftArtifact | None = None
    skipped: bool = False

    @property
    def scheme(self) -> Scheme | None:
        if isinstance(self.artifact, TwinLogArtifact):
            return Scheme.TLQ
        if isinstance(self.artifact, UniformArtifact):
            return Scheme.UNIFORM
        return None

    @property
    def plan_kind(self) -> str:
        if self.skipped:
            return "skipped"
        return self.plan.kind.value if self.plan else RotationKind.IDENTITY.value
