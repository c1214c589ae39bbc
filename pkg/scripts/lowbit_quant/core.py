"""Core pipeline: calibration, quantization and simulation of linear layers."""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from lowbit_quant.config import QuantConfig
from lowbit_quant.errors import CalibrationError, DimensionMismatchError, ManifestError
from lowbit_quant.intpipe import integer_matmul, integerize, shift_matmul, shift_weights
from lowbit_quant.models import (
    AblationRow,
    LayerReport,
    LayerStats,
    QuantizedLayer,
    RotationKind,
    RotationMode,
    RotationPlan,
    Scheme,
    ShiftConfig,
    Side,
    SmoothingVector,
    TwinLogArtifact,
    UniformArtifact,
)
from lowbit_quant.quantizers import get_quantizer
from lowbit_quant.quantizers.twinlog import tlq_dequantize
from lowbit_quant.quantizers.uniform import (
    per_token_dequantize,
    per_token_mse,
    per_token_quantize,
    uniform_dequantize_rows,
)
from lowbit_quant.rotation import (
    apply_rotation,
    apply_smoothing,
    compute_J,
    plan_for_mode,
    smooth_migrate,
)
from lowbit_quant.tensorio import CorpusLayer, load_artifact, safe_stem, save_artifact

logger = logging.getLogger(__name__)

INDEX_NAME = "index.json"

# (label, scheme, rotation mode) in ablation-table order
ABLATION_GRID = (
    ("neither", Scheme.UNIFORM, RotationMode.NONE),
    ("tlq", Scheme.TLQ, RotationMode.NONE),
    ("ars", Scheme.UNIFORM, RotationMode.ADAPTIVE),
    ("tlq+ars", Scheme.TLQ, RotationMode.ADAPTIVE),
)


def float_reference(acts: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Unquantized layer output X W^T in float64, shaped (..., out)."""
    acts = np.asarray(acts, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if acts.shape[-1] != weights.shape[1]:
        raise DimensionMismatchError(
            f"activations have {acts.shape[-1]} channels, weights expect {weights.shape[1]}"
        )
    return acts @ weights.T


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    """||approx - exact||_F / ||exact||_F (absolute norm when exact is zero)."""
    diff = np.linalg.norm(np.asarray(approx, dtype=np.float64) - exact)
    norm = np.linalg.norm(exact)
    return float(diff / norm) if norm > 0 else float(diff)


def calibration_slice(acts: np.ndarray, config: QuantConfig) -> np.ndarray:
    """The first calib_batches batches of a B x N x C batch."""
    acts = np.asarray(acts, dtype=np.float64)
    if acts.size == 0:
        raise CalibrationError("calibration set is empty")
    return acts[: config.calib_batches] if acts.ndim == 3 else acts


def calibrate_layer(
    acts: np.ndarray, weights: np.ndarray, config: QuantConfig
) -> tuple[SmoothingVector, RotationPlan, LayerStats]:
    """
    Smoothing factors, J on the smoothed batch, then a rotation plan.

    Args:
        acts: Calibration activations, B x N x C
        weights: Layer weights, out x C
        config: Pipeline configuration

    Returns:
        (smoothing, plan, stats)
    """
    acts = calibration_slice(acts, config)
    smoothing, smoothed, _ = smooth_migrate(acts, weights, config.migration_strength)
    stats = compute_J(smoothed)
    plan = plan_for_mode(config.rotation_mode, stats, smoothed, config)
    return smoothing, plan, stats


def fold_layer(
    acts: np.ndarray, weights: np.ndarray, smoothing: SmoothingVector, plan: RotationPlan
) -> tuple[np.ndarray, np.ndarray]:
    """(X / d) T and (W * d) T; their product equals X W^T."""
    x = apply_rotation(apply_smoothing(acts, smoothing, Side.ACTIVATION), plan, Side.ACTIVATION)
    w = apply_rotation(apply_smoothing(weights, smoothing, Side.WEIGHT), plan, Side.WEIGHT)
    return x, w


def quantize_layer(
    weights: np.ndarray,
    smoothing: SmoothingVector,
    plan: RotationPlan,
    config: QuantConfig,
    name: str = "",
    stats: LayerStats | None = None,
) -> QuantizedLayer:
    """
    Fold smoothing and rotation into the weights and quantize them.

    Skip-listed layers come back as pass-through (skipped=True, no artifacts).
    Twin-log layers also get their shift artifact.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if config.is_skipped(name):
        logger.info("%s: kept at full precision (skip list)", name)
        return QuantizedLayer(name=name, weight=weights, skipped=True)

    folded = apply_rotation(apply_smoothing(weights, smoothing, Side.WEIGHT), plan, Side.WEIGHT)
    quantizer = get_quantizer(config.scheme, config.clip_grid)
    artifact = quantizer.quantize(folded, config.bits_w)
    shift = None
    if isinstance(artifact, TwinLogArtifact):
        shift = integerize(artifact, ShiftConfig(config.shift_precision))
    logger.info("%s: %s W%d, plan %s", name, quantizer.name, config.bits_w, plan.kind.value)
    return QuantizedLayer(
        name=name,
        weight=weights,
        smoothing=smoothing,
        plan=plan,
        stats=stats,
        folded=folded,
        artifact=artifact,
        shift=shift,
    )


def _dequantized_weights(layer: QuantizedLayer) -> np.ndarray:
    if isinstance(layer.artifact, TwinLogArtifact):
        return tlq_dequantize(layer.artifact)
    return uniform_dequantize_rows(layer.artifact)


def simulate_layer(
    layer: QuantizedLayer, acts: np.ndarray, config: QuantConfig
) -> tuple[np.ndarray, LayerReport]:
    """
    Run a quantized layer on activations and compare with the float layer.

    Activations are smoothed, rotated and quantized per token at bits_a, then
    multiplied through the shift pipeline (twin-log) or the integer core
    (uniform). With bits_a >= 16 activations stay in float.

    Returns:
        (output shaped (..., out), report without weight errors)
    """
    acts = np.asarray(acts, dtype=np.float64)
    reference = float_reference(acts, layer.weight)
    report = LayerReport(name=layer.name, plan_kind=layer.plan_kind, skipped=layer.skipped)
    if layer.skipped:
        return reference, report

    smoothed = apply_smoothing(acts, layer.smoothing, Side.ACTIVATION)
    rotated = apply_rotation(smoothed, layer.plan, Side.ACTIVATION)
    tokens = rotated.reshape(-1, rotated.shape[-1])

    if config.activation_passthrough:
        if layer.shift is not None:
            effective = shift_weights(layer.shift)
        else:
            effective = _dequantized_weights(layer)
        output = tokens @ effective.T
    else:
        report.act_mse_pre = per_token_mse(smoothed, config.bits_a)
        report.act_mse_post = per_token_mse(tokens, config.bits_a)
        quant = per_token_quantize(tokens, config.bits_a)
        if layer.shift is not None:
            output = shift_matmul(layer.shift, quant)
            dequant = per_token_dequantize(quant) @ _dequantized_weights(layer).T
            scale = float(np.max(np.abs(dequant), initial=0.0))
            deviation = float(np.max(np.abs(output - dequant), initial=0.0))
            report.shift_max_deviation = deviation / scale if scale > 0 else deviation
        else:
            output = integer_matmul(layer.artifact, quant)

    output = output.reshape(*acts.shape[:-1], output.shape[-1])
    report.output_error = relative_error(output, reference)
    return output, report


def scheme_weight_error(layer: QuantizedLayer, scheme: Scheme, config: QuantConfig) -> float:
    """L2 error of the folded weights under a scheme, reusing the layer's own artifact."""
    if layer.scheme is scheme:
        diff = _dequantized_weights(layer) - layer.folded
        return float(np.sqrt(np.sum(diff * diff)))
    return get_quantizer(scheme, config.clip_grid).weight_error(layer.folded, config.bits_w)


def evaluate_layer(
    name: str,
    acts: np.ndarray,
    weights: np.ndarray,
    config: QuantConfig,
    calib: np.ndarray | None = None,
) -> LayerReport:
    """
    Calibrate, quantize and simulate one layer.

    Args:
        name: Layer name (matched against the skip list)
        acts: Evaluation activations, B x N x C
        weights: Layer weights, out x C
        config: Pipeline configuration
        calib: Calibration activations (defaults to acts)

    Returns:
        Complete LayerReport
    """
    if config.is_skipped(name):
        return LayerReport(name=name, plan_kind="skipped", skipped=True)
    calib = acts if calib is None else calib
    smoothing, plan, stats = calibrate_layer(calib, weights, config)
    layer = quantize_layer(weights, smoothing, plan, config, name=name, stats=stats)
    _, report = simulate_layer(layer, acts, config)
    return _complete_report(report, layer, stats, config)


def _complete_report(
    report: LayerReport, layer: QuantizedLayer, stats: LayerStats, config: QuantConfig
) -> LayerReport:
    report.weight_error_uniform = scheme_weight_error(layer, Scheme.UNIFORM, config)
    report.weight_error_tlq = scheme_weight_error(layer, Scheme.TLQ, config)
    report.J = stats.J
    report.peak = stats.peak
    report.frac_gt_5 = stats.frac_gt_5
    report.frac_gt_10 = stats.frac_gt_10
    report.frac_gt_100 = stats.frac_gt_100
    return report


def evaluate_saved_layer(
    layer: QuantizedLayer,
    acts: np.ndarray,
    config: QuantConfig,
    calib: np.ndarray | None = None,
) -> tuple[np.ndarray, LayerReport]:
    """
    Simulate a reloaded layer and fill in its full report.

    The outlier profile is measured again on the calibration slice smoothed
    with the layer's saved factors, which is the batch its plan was built on.
    """
    output, report = simulate_layer(layer, acts, config)
    if layer.skipped:
        return output, report
    calib = acts if calib is None else calib
    smoothed = apply_smoothing(calibration_slice(calib, config), layer.smoothing, Side.ACTIVATION)
    return output, _complete_report(report, layer, compute_J(smoothed), config)


def run_ablation(
    name: str, acts: np.ndarray, weights: np.ndarray, config: QuantConfig
) -> list[AblationRow]:
    """
    The four twin-log x adaptive-rotation configurations of one layer.

    Rotation-off arms ("neither", "tlq") also skip smoothing, so "neither" is
    plain uniform weights on raw activations. The skip list is not consulted.
    """
    rows = []
    for label, scheme, mode in ABLATION_GRID:
        cfg = config.with_overrides(scheme=scheme, rotation_mode=mode, skip_layers=[])
        smoothing, plan, stats = calibrate_layer(acts, weights, cfg)
        if mode is RotationMode.NONE:
            smoothing = SmoothingVector.unit(smoothing.factors.shape[0], cfg.migration_strength)
        layer = quantize_layer(weights, smoothing, plan, cfg, name=name, stats=stats)
        _, report = simulate_layer(layer, acts, cfg)
        rows.append(
            AblationRow(
                layer=name,
                label=label,
                scheme=scheme,
                rotation_mode=mode,
                weight_error=scheme_weight_error(layer, scheme, cfg),
                act_mse=report.act_mse_post,
                output_error=report.output_error,
            )
        )
    return rows


def dual_fraction(reports: list[LayerReport]) -> float:
    """Fraction of non-skipped layers routed to the dual transform."""
    active = [r for r in reports if not r.skipped]
    if not active:
        return 0.0
    return sum(r.plan_kind == RotationKind.DUAL.value for r in active) / len(active)


# =============================================================================
# Saving quantized layers
# =============================================================================


def save_layer(layer: QuantizedLayer, directory: Path) -> dict:
    """Write a layer's artifacts; returns its index entry."""
    stem = safe_stem(layer.name)
    entry = {"name": layer.name, "skipped": layer.skipped, "artifacts": {}}
    if layer.skipped:
        return entry
    parts = {
        "smoothing": layer.smoothing,
        "rotation": layer.plan,
        "weights": layer.artifact,
        "shift": layer.shift,
    }
    for role, artifact in parts.items():
        if artifact is not None:
            path = save_artifact(artifact, directory, f"{stem}.{artifact.artifact_kind}")
            entry["artifacts"][role] = path.name
    return entry


def load_layer(entry: dict, directory: Path, weights: np.ndarray) -> QuantizedLayer:
    """Rebuild a QuantizedLayer from an index entry and the original weights."""
    name = entry["name"]
    if entry.get("skipped"):
        return QuantizedLayer(name=name, weight=np.asarray(weights, dtype=np.float64), skipped=True)
    loaded = {role: load_artifact(Path(directory) / f) for role, f in entry["artifacts"].items()}
    artifact = loaded.get("weights")
    smoothing, plan = loaded.get("smoothing"), loaded.get("rotation")
    if not isinstance(artifact, (TwinLogArtifact, UniformArtifact)) or smoothing is None or plan is None:
        raise ManifestError(f"layer '{name}': incomplete artifacts in {directory}")
    weights = np.asarray(weights, dtype=np.float64)
    folded = apply_rotation(apply_smoothing(weights, smoothing, Side.WEIGHT), plan, Side.WEIGHT)
    return QuantizedLayer(
        name=name,
        weight=weights,
        folded=folded,
        smoothing=smoothing,
        plan=plan,
        artifact=artifact,
        shift=loaded.get("shift"),
    )


# =============================================================================
# Orchestrator
# =============================================================================


class LayerPipeline:
    """Runs the pipeline over a corpus of layers."""

    def __init__(self, config: QuantConfig | None = None, jobs: int = 1):
        """
        Initialize the pipeline.

        Args:
            config: Pipeline configuration (defaults when omitted)
            jobs: Number of layers processed concurrently
        """
        self.config = config or QuantConfig()
        self.jobs = max(1, int(jobs))

    def _map(self, fn, items: list) -> list:
        # Executor.map keeps input order, so results are deterministic
        if self.jobs == 1 or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            return list(pool.map(fn, items))

    def calibrate(self, layers: list[CorpusLayer]) -> list[tuple[SmoothingVector, RotationPlan, LayerStats]]:
        """Calibration results per layer, in corpus order."""
        return self._map(
            lambda layer: calibrate_layer(layer.activations, layer.weight, self.config), layers
        )

    def _quantize_one(self, layer: CorpusLayer) -> QuantizedLayer:
        if self.config.is_skipped(layer.name):
            return quantize_layer(layer.weight, None, None, self.config, name=layer.name)
        smoothing, plan, stats = calibrate_layer(layer.activations, layer.weight, self.config)
        return quantize_layer(layer.weight, smoothing, plan, self.config, layer.name, stats)

    def quantize(self, layers: list[CorpusLayer]) -> list[QuantizedLayer]:
        """Calibrate and quantize every layer."""
        return self._map(self._quantize_one, layers)

    def simulate(
        self, quantized: list[QuantizedLayer], layers: list[CorpusLayer]
    ) -> list[tuple[np.ndarray, LayerReport]]:
        """Simulate quantized layers on their corpus activations."""
        acts = {layer.name: layer.activations for layer in layers}
        return self._map(lambda q: simulate_layer(q, acts[q.name], self.config), quantized)

    def evaluate_saved(
        self, quantized: list[QuantizedLayer], layers: list[CorpusLayer]
    ) -> list[tuple[np.ndarray, LayerReport]]:
        """Outputs and full reports of reloaded layers, in the order given."""
        acts = {layer.name: layer.activations for layer in layers}
        return self._map(lambda q: evaluate_saved_layer(q, acts[q.name], self.config), quantized)

    def run(self, layers: list[CorpusLayer]) -> list[LayerReport]:
        """Full evaluation of every layer, reports sorted by layer name."""
        reports = self._map(
            lambda layer: evaluate_layer(layer.name, layer.activations, layer.weight, self.config),
            layers,
        )
        return sorted(reports, key=lambda r: r.name)

    def ablation(self, layers: list[CorpusLayer]) -> list[AblationRow]:
        """Ablation rows of every non-skipped layer, grouped by layer name."""
        active = sorted(
            (layer for layer in layers if not self.config.is_skipped(layer.name)),
            key=lambda layer: layer.name,
        )
        grouped = self._map(
            lambda layer: run_ablation(layer.name, layer.activations, layer.weight, self.config),
            active,
        )
        return [row for rows in grouped for row in rows]
