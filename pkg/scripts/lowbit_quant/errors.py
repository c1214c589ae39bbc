"""Exception hierarchy for lowbit_quant."""


class LowbitError(Exception):
    """Base class for all errors raised by lowbit_quant."""


# Tensor container


class TensorIOError(LowbitError):
    """Reading or writing a tensor container failed."""


class ManifestError(TensorIOError):
    """A manifest could not be parsed or is structurally invalid."""


class UnknownTensorError(TensorIOError):
    """A tensor name is not present in the manifest."""


class MissingTensorFileError(TensorIOError):
    """A manifest entry references a file that does not exist."""


class SizeMismatchError(TensorIOError):
    """A binary file does not hold exactly the bytes its entry declares."""


class UnknownDtypeError(TensorIOError):
    """A manifest entry declares a dtype outside the supported set."""


# Numerics


class QuantizationError(LowbitError, ValueError):
    """Invalid quantizer input (bits, clip factors, empty data, bad codes)."""


class ArtifactConsistencyError(QuantizationError):
    """An artifact's masks, codes or parameters contradict each other."""


class AccumulatorOverflowError(LowbitError, OverflowError):
    """An exact integer accumulation exceeded the simulated accumulator width."""


class UnsupportedDimensionError(LowbitError, ValueError):
    """A transform cannot be built for the requested dimension."""


class DimensionMismatchError(LowbitError, ValueError):
    """Tensor shapes do not line up."""


class CalibrationError(LowbitError, ValueError):
    """Calibration could not run (e.g. empty calibration set)."""


class ConfigError(LowbitError, ValueError):
    """Invalid configuration key or value."""
