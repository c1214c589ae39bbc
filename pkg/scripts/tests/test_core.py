"""Tests for lowbit_quant.core module."""

import numpy as np
import pytest

from lowbit_quant.core import (
    ABLATION_GRID,
    LayerPipeline,
    calibrate_layer,
    dual_fraction,
    evaluate_layer,
    evaluate_saved_layer,
    float_reference,
    fold_layer,
    load_layer,
    quantize_layer,
    relative_error,
    run_ablation,
    save_layer,
    simulate_layer,
)
from lowbit_quant.errors import CalibrationError, DimensionMismatchError, ManifestError
from lowbit_quant.models import (
    LayerReport,
    RotationKind,
    RotationMode,
    RotationPlan,
    Scheme,
    SmoothingVector,
)
from lowbit_quant.quantizers import UniformWeightQuantizer
from lowbit_quant.quantizers.twinlog import pow2, tlq_quantize_matrix
from lowbit_quant.quantizers.uniform import per_token_mse
from lowbit_quant.synthetic import make_rng


def exact_weights():
    """Weights that 3-bit twin-log reconstructs exactly."""
    rng = make_rng(6)
    pos = pow2(rng.integers(-1, 3, size=(8, 16)).astype(np.float64))
    neg = -pow2(rng.integers(-2, 3, size=(8, 16)).astype(np.float64))
    w = np.where(rng.random((8, 16)) < 0.5, pos, neg)
    w[:, 0], w[:, 1] = 2.0**-1, 2.0**2
    w[:, 2], w[:, 3] = -(2.0**-2), -(2.0**2)
    return w


class TestHelpers:
    """Tests for float_reference and relative_error."""

    def test_float_reference_shape(self, salient_layer):
        """Test X W^T keeps the leading axes."""
        acts, weights = salient_layer
        assert float_reference(acts, weights).shape == (4, 16, 32)

    def test_float_reference_mismatch(self):
        """Test channel counts must agree."""
        with pytest.raises(DimensionMismatchError):
            float_reference(np.ones((2, 3)), np.ones((4, 5)))

    def test_relative_error(self):
        """Test relative Frobenius error and the zero-reference case."""
        assert relative_error(np.array([3.0, 4.0]), np.array([0.0, 4.0])) == 0.75
        assert relative_error(np.array([3.0, 4.0]), np.zeros(2)) == 5.0


class TestCalibrateLayer:
    """Tests for calibrate_layer."""

    def test_none_mode_keeps_smoothing(self, salient_layer, fast_config):
        """Test rotation_mode none gives identity but still smooths."""
        acts, weights = salient_layer
        config = fast_config.with_overrides(rotation_mode="none")
        smoothing, plan, stats = calibrate_layer(acts, weights, config)
        assert plan.kind is RotationKind.IDENTITY
        assert not np.allclose(smoothing.factors, 1.0)
        assert stats.channels == 64

    def test_calm_layer_gets_hadamard(self, calm_layer, fast_config):
        """Test a low-fluctuation layer is routed to Hadamard."""
        acts, weights = calm_layer
        _, plan, stats = calibrate_layer(acts, weights, fast_config)
        assert stats.J < 1.0
        assert plan.kind is RotationKind.HADAMARD

    def test_salient_layer_gets_dual(self, salient_layer, fast_config):
        """Test a salient-outlier layer is routed to the dual transform."""
        acts, weights = salient_layer
        _, plan, stats = calibrate_layer(acts, weights, fast_config)
        assert stats.J >= 1.0
        assert plan.kind is RotationKind.DUAL

    def test_calibration_batches(self, calm_layer, fast_config):
        """Test only the first calib_batches batches are used."""
        acts, weights = calm_layer
        _, _, stats = calibrate_layer(acts, weights, fast_config.with_overrides(calib_batches=2))
        assert stats.batch == 2

    def test_empty_batch(self, calm_layer, fast_config):
        """Test an empty calibration set raises CalibrationError."""
        _, weights = calm_layer
        with pytest.raises(CalibrationError):
            calibrate_layer(np.zeros((0, 4, 64)), weights, fast_config)


class TestQuantizeLayer:
    """Tests for quantize_layer and fold_layer."""

    def test_skip_list_passthrough(self, calm_layer, fast_config):
        """Test a skip-listed layer is returned unquantized and simulates bit-exactly."""
        acts, weights = calm_layer
        layer = quantize_layer(weights, None, None, fast_config, name="transformer.adaln_single.linear")
        assert layer.skipped and layer.artifact is None and layer.plan_kind == "skipped"
        output, report = simulate_layer(layer, acts, fast_config)
        np.testing.assert_array_equal(output, acts @ weights.T)
        assert report.skipped

    def test_identity_matches_direct_quantization(self, salient_layer, fast_config):
        """Test unit smoothing and identity plan equal direct twin-log quantization."""
        _, weights = salient_layer
        layer = quantize_layer(
            weights, SmoothingVector.unit(64), RotationPlan.identity(64), fast_config, name="l"
        )
        direct = tlq_quantize_matrix(weights, 3, fast_config.clip_grid)
        np.testing.assert_array_equal(layer.artifact.codes, direct.codes)
        np.testing.assert_array_equal(layer.artifact.params.s_pos, direct.params.s_pos)
        np.testing.assert_array_equal(layer.artifact.params.z_neg, direct.params.z_neg)
        assert layer.scheme is Scheme.TLQ
        assert layer.shift is not None

    def test_uniform_scheme_has_no_shift(self, salient_layer, fast_config):
        """Test uniform layers carry no shift artifact."""
        acts, weights = salient_layer
        config = fast_config.with_overrides(scheme="uniform")
        smoothing, plan, _ = calibrate_layer(acts, weights, config)
        layer = quantize_layer(weights, smoothing, plan, config, name="l")
        assert layer.scheme is Scheme.UNIFORM
        assert layer.shift is None

    @pytest.mark.parametrize("mode", ["none", "hadamard", "dual", "adaptive"])
    def test_fold_preserves_product(self, salient_layer, fast_config, mode):
        """Test smoothing plus rotation leave X W^T unchanged."""
        acts, weights = salient_layer
        config = fast_config.with_overrides(rotation_mode=mode)
        smoothing, plan, _ = calibrate_layer(acts, weights, config)
        x, w = fold_layer(acts, weights, smoothing, plan)
        assert relative_error(x @ w.T, acts @ weights.T) < 1e-5


class TestSimulateLayer:
    """Tests for simulate_layer."""

    def test_passthrough_exact_weights(self, rng, fast_config):
        """Test A16 with exactly representable weights matches the float layer."""
        w = exact_weights()
        acts = rng.standard_normal((2, 5, 16))
        config = fast_config.with_overrides(bits_a=16, rotation_mode="none")
        layer = quantize_layer(w, SmoothingVector.unit(16), RotationPlan.identity(16), config, "l")
        output, report = simulate_layer(layer, acts, config)
        np.testing.assert_allclose(output, acts @ w.T, rtol=1e-15, atol=0)
        assert report.output_error < 1e-15

    def test_zero_activations(self, salient_layer, fast_config):
        """Test zero activations give a zero output."""
        acts, weights = salient_layer
        smoothing, plan, _ = calibrate_layer(acts, weights, fast_config)
        layer = quantize_layer(weights, smoothing, plan, fast_config, "l")
        output, report = simulate_layer(layer, np.zeros((1, 3, 64)), fast_config)
        assert output.shape == (1, 3, 32)
        assert not output.any()
        assert report.output_error == 0.0

    def test_more_activation_bits_help(self, salient_layer, fast_config):
        """Test W3A8 error is below W3A4 error."""
        acts, weights = salient_layer
        smoothing, plan, _ = calibrate_layer(acts, weights, fast_config)
        layer = quantize_layer(weights, smoothing, plan, fast_config, "l")
        _, a4 = simulate_layer(layer, acts, fast_config)
        _, a8 = simulate_layer(layer, acts, fast_config.with_overrides(bits_a=8))
        assert a8.output_error < a4.output_error

    def test_shift_deviation_is_small(self, salient_layer, fast_config):
        """Test the shift pipeline stays near the dequantized float product."""
        acts, weights = salient_layer
        report = evaluate_layer("l", acts, weights, fast_config)
        assert 0.0 <= report.shift_max_deviation < 0.05

    def test_uniform_integer_core(self, salient_layer, fast_config):
        """Test the uniform scheme runs through the integer core."""
        acts, weights = salient_layer
        report = evaluate_layer("l", acts, weights, fast_config.with_overrides(scheme="uniform"))
        assert report.shift_max_deviation == 0.0
        assert 0.0 < report.output_error < 1.0


class TestEvaluateLayer:
    """Tests for evaluate_layer."""

    def test_report_complete(self, salient_layer, fast_config):
        """Test every metric is finite and nonnegative."""
        acts, weights = salient_layer
        report = evaluate_layer("blocks.0.attn", acts, weights, fast_config)
        assert report.plan_kind == "dual"
        for column in LayerReport.COLUMNS[2:-1]:
            value = getattr(report, column)
            assert np.isfinite(value) and value >= 0.0, column
        assert report.weight_error_uniform > 0.0
        assert report.act_mse_post <= report.act_mse_pre

    def test_skipped_report(self, calm_layer, fast_config):
        """Test skip-listed layers report as skipped."""
        acts, weights = calm_layer
        report = evaluate_layer("proj_out", acts, weights, fast_config)
        assert report.skipped and report.plan_kind == "skipped"

    def test_deterministic(self, calm_layer, fast_config):
        """Test two evaluations produce identical reports."""
        acts, weights = calm_layer
        first = evaluate_layer("l", acts, weights, fast_config)
        second = evaluate_layer("l", acts, weights, fast_config)
        assert first == second


class TestAblation:
    """Tests for run_ablation and dual_fraction."""

    def test_four_rows_in_order(self, salient_layer, fast_config):
        """Test the grid order and the error ordering on a salient layer."""
        acts, weights = salient_layer
        rows = run_ablation("blocks.0.attn", acts, weights, fast_config)
        assert [r.label for r in rows] == [label for label, _, _ in ABLATION_GRID]
        errors = {r.label: r.output_error for r in rows}
        assert errors["tlq+ars"] <= errors["tlq"]
        assert errors["tlq+ars"] < errors["neither"]
        assert rows[3].scheme is Scheme.TLQ and rows[3].rotation_mode is RotationMode.ADAPTIVE

    def test_rotation_off_arms_are_unsmoothed(self, salient_layer, fast_config):
        """Test "neither" and "tlq" see the raw activations and raw weights."""
        acts, weights = salient_layer
        rows = {r.label: r for r in run_ablation("blocks.0.attn", acts, weights, fast_config)}
        raw_mse = per_token_mse(acts, fast_config.bits_a)
        assert rows["neither"].act_mse == raw_mse
        assert rows["tlq"].act_mse == raw_mse
        expected = UniformWeightQuantizer().weight_error(weights, fast_config.bits_w)
        assert rows["neither"].weight_error == pytest.approx(expected, rel=1e-12)

    def test_ignores_skip_list(self, calm_layer, fast_config):
        """Test ablation runs even for skip-listed names."""
        acts, weights = calm_layer
        assert len(run_ablation("proj_out", acts, weights, fast_config)) == 4

    def test_dual_fraction(self):
        """Test skipped layers are excluded from the fraction."""
        reports = [
            LayerReport(name="a", plan_kind="dual"),
            LayerReport(name="b", plan_kind="hadamard"),
            LayerReport(name="c", plan_kind="skipped", skipped=True),
        ]
        assert dual_fraction(reports) == 0.5
        assert dual_fraction([]) == 0.0


class TestSaveLoad:
    """Tests for save_layer / load_layer."""

    def test_round_trip_simulates_identically(self, tmp_path, salient_layer, fast_config):
        """Test a reloaded layer produces the same output."""
        acts, weights = salient_layer
        smoothing, plan, _ = calibrate_layer(acts, weights, fast_config)
        layer = quantize_layer(weights, smoothing, plan, fast_config, "blocks/0:attn")
        entry = save_layer(layer, tmp_path)
        assert set(entry["artifacts"]) == {"smoothing", "rotation", "weights", "shift"}
        loaded = load_layer(entry, tmp_path, weights)
        assert loaded.plan_kind == "dual"
        np.testing.assert_array_equal(loaded.folded, layer.folded)
        expected, _ = simulate_layer(layer, acts, fast_config)
        actual, _ = simulate_layer(loaded, acts, fast_config)
        np.testing.assert_array_equal(actual, expected)

    def test_skipped_entry(self, tmp_path, calm_layer, fast_config):
        """Test skipped layers save no artifacts."""
        _, weights = calm_layer
        layer = quantize_layer(weights, None, None, fast_config, name="proj_out")
        entry = save_layer(layer, tmp_path)
        assert entry == {"name": "proj_out", "skipped": True, "artifacts": {}}
        assert load_layer(entry, tmp_path, weights).skipped

    def test_incomplete_entry(self, tmp_path, calm_layer):
        """Test an entry without weights is rejected."""
        _, weights = calm_layer
        with pytest.raises(ManifestError, match="incomplete"):
            load_layer({"name": "l", "skipped": False, "artifacts": {}}, tmp_path, weights)

    def test_saved_layer_reports_like_fresh_run(self, tmp_path, salient_layer, fast_config):
        """Test a reloaded layer yields the same report as calibrating from scratch."""
        acts, weights = salient_layer
        smoothing, plan, stats = calibrate_layer(acts, weights, fast_config)
        layer = quantize_layer(weights, smoothing, plan, fast_config, "blocks.0.attn", stats=stats)
        loaded = load_layer(save_layer(layer, tmp_path), tmp_path, weights)
        output, report = evaluate_saved_layer(loaded, acts, fast_config)
        fresh = evaluate_layer("blocks.0.attn", acts, weights, fast_config)
        assert output.shape == acts.shape[:-1] + (weights.shape[0],)
        assert report.plan_kind == fresh.plan_kind == "dual"
        assert report.output_error == fresh.output_error
        assert report.weight_error_tlq == pytest.approx(fresh.weight_error_tlq, rel=1e-6)
        assert report.weight_error_uniform == pytest.approx(fresh.weight_error_uniform, rel=1e-6)
        assert report.J == pytest.approx(fresh.J, rel=1e-5)

    def test_saved_skipped_layer(self, tmp_path, calm_layer, fast_config):
        """Test a skipped entry reports as skipped."""
        acts, weights = calm_layer
        layer = quantize_layer(weights, None, None, fast_config, name="proj_out")
        loaded = load_layer(save_layer(layer, tmp_path), tmp_path, weights)
        _, report = evaluate_saved_layer(loaded, acts, fast_config)
        assert report.skipped


class TestLayerPipeline:
    """Tests for the LayerPipeline orchestrator."""

    def test_run_sorted_by_name(self, small_corpus, fast_config):
        """Test reports come back sorted with the skip list honored."""
        reports = LayerPipeline(fast_config).run(list(reversed(small_corpus)))
        assert [r.name for r in reports] == ["blocks.0.attn", "blocks.1.mlp", "proj_out"]
        assert [r.plan_kind for r in reports] == ["dual", "hadamard", "skipped"]

    def test_jobs_do_not_change_results(self, small_corpus, fast_config):
        """Test concurrent runs match sequential ones."""
        sequential = LayerPipeline(fast_config, jobs=1).run(small_corpus)
        concurrent = LayerPipeline(fast_config, jobs=3).run(small_corpus)
        assert sequential == concurrent

    def test_quantize_and_simulate(self, small_corpus, fast_config):
        """Test quantize keeps corpus order and simulate follows it."""
        pipeline = LayerPipeline(fast_config, jobs=2)
        quantized = pipeline.quantize(small_corpus)
        assert [q.name for q in quantized] == [layer.name for layer in small_corpus]
        assert quantized[2].skipped
        results = pipeline.simulate(quantized, small_corpus)
        assert results[0][0].shape == (4, 16, 32)
        assert results[2][1].skipped

    def test_calibrate(self, small_corpus, fast_config):
        """Test calibrate returns one triple per layer."""
        triples = LayerPipeline(fast_config).calibrate(small_corpus[:2])
        assert [plan.kind for _, plan, _ in triples] == [RotationKind.DUAL, RotationKind.HADAMARD]

    def test_ablation_skips_listed_layers(self, small_corpus, fast_config):
        """Test ablation covers only non-skipped layers."""
        rows = LayerPipeline(fast_config).ablation(small_corpus)
        assert len(rows) == 8
        assert {r.layer for r in rows} == {"blocks.0.attn", "blocks.1.mlp"}

    def test_default_config(self):
        """Test defaults when no config is given."""
        pipeline = LayerPipeline(jobs=0)
        assert pipeline.config.bits_w == 3
        assert pipeline.jobs == 1
