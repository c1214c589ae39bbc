"""Tests for lowbit_quant.report module."""

import csv
import json

import pytest

from lowbit_quant.core import LayerPipeline
from lowbit_quant.errors import TensorIOError
from lowbit_quant.models import LayerReport, SyntheticSpec
from lowbit_quant.report import bit_sweep, report_errors, summarize, weight_error_benchmark


def read_csv(path):
    with path.open(newline="") as f:
        return list(csv.DictReader(f))


class TestSummarize:
    """Tests for summarize."""

    def test_aggregates_skip_inactive(self):
        """Test means and counts ignore skipped layers."""
        reports = [
            LayerReport("a", "dual", weight_error_uniform=2.0, weight_error_tlq=1.0, output_error=0.2),
            LayerReport("b", "hadamard", weight_error_uniform=1.0, weight_error_tlq=3.0, output_error=0.4),
            LayerReport("c", "skipped", skipped=True),
        ]
        summary = summarize(reports)
        assert summary["layers"] == 3
        assert summary["skipped"] == 1
        assert summary["dual_fraction"] == 0.5
        assert summary["tlq_wins"] == 1
        assert summary["mean_weight_error_tlq"] == 2.0
        assert summary["mean_output_error"] == pytest.approx(0.3)

    def test_empty(self):
        """Test an empty report list."""
        summary = summarize([])
        assert summary["layers"] == 0
        assert summary["mean_output_error"] == 0.0


class TestReportErrors:
    """Tests for report_errors."""

    def test_layer_table(self, tmp_path, small_corpus, fast_config):
        """Test one sorted CSV row per layer plus the JSON summary."""
        reports = LayerPipeline(fast_config).run(small_corpus)
        written = report_errors(list(reversed(reports)), tmp_path, fast_config)
        assert [p.name for p in written] == ["layers.csv", "summary.json"]

        rows = read_csv(tmp_path / "layers.csv")
        assert [r["name"] for r in rows] == ["blocks.0.attn", "blocks.1.mlp", "proj_out"]
        assert list(rows[0]) == list(LayerReport.COLUMNS)
        assert rows[2]["skipped"] == "True"

        document = json.loads((tmp_path / "summary.json").read_text())
        assert document["config"]["block_size"] == 32
        assert document["summary"]["dual_fraction"] == 0.5
        assert len(document["layers"]) == 3

    def test_two_layers(self, tmp_path):
        """Test two reports give exactly two data rows."""
        reports = [LayerReport("x", "identity"), LayerReport("y", "dual", output_error=0.125)]
        report_errors(reports, tmp_path)
        rows = read_csv(tmp_path / "layers.csv")
        assert len(rows) == 2
        assert float(rows[1]["output_error"]) == 0.125

    def test_optional_tables(self, tmp_path, small_corpus, fast_config):
        """Test ablation, sweep and benchmark sections."""
        pipeline = LayerPipeline(fast_config)
        ablation = pipeline.ablation(small_corpus[:1])
        layer = small_corpus[0]
        sweep = bit_sweep(layer.name, layer.activations, layer.weight, fast_config, ((3, 4), (3, 8)))
        benchmark = weight_error_benchmark(2, SyntheticSpec(rows=8, cols=16, seed=1), 3, fast_config)
        written = report_errors([], tmp_path, fast_config, ablation, sweep, benchmark)
        assert [p.name for p in written] == ["layers.csv", "ablation.csv", "sweep.csv", "summary.json"]

        ablation_rows = read_csv(tmp_path / "ablation.csv")
        assert [r["label"] for r in ablation_rows] == ["neither", "tlq", "ars", "tlq+ars"]
        assert ablation_rows[0]["scheme"] == "uniform"
        sweep_rows = read_csv(tmp_path / "sweep.csv")
        assert [r["setting"] for r in sweep_rows] == ["W3A4", "W3A8"]
        document = json.loads((tmp_path / "summary.json").read_text())
        assert document["benchmark"]["count"] == 2

    def test_byte_identical_rerun(self, tmp_path, small_corpus, fast_config):
        """Test reruns on the same inputs write identical bytes."""
        outputs = []
        for run in ("first", "second"):
            reports = LayerPipeline(fast_config, jobs=2).run(small_corpus)
            out_dir = tmp_path / run
            report_errors(reports, out_dir, fast_config)
            outputs.append(
                [(out_dir / n).read_bytes() for n in ("layers.csv", "summary.json")]
            )
        assert outputs[0] == outputs[1]

    def test_unwritable_directory(self, tmp_path):
        """Test write failures surface as TensorIOError."""
        blocker = tmp_path / "taken"
        blocker.write_text("not a directory")
        with pytest.raises(TensorIOError, match="cannot write report"):
            report_errors([LayerReport("x", "identity")], blocker)


class TestBitSweep:
    """Tests for bit_sweep."""

    def test_more_activation_bits_help(self, salient_layer, fast_config):
        """Test W3A8 beats W3A4 at the same weight error."""
        acts, weights = salient_layer
        a4, a8 = bit_sweep("l", acts, weights, fast_config, ((3, 4), (3, 8)))
        assert (a4.bits_w, a4.bits_a) == (3, 4)
        assert a8.weight_error == a4.weight_error
        assert a8.output_error < a4.output_error

    def test_ignores_skip_list(self, calm_layer, fast_config):
        """Test sweeps evaluate skip-listed names too."""
        acts, weights = calm_layer
        rows = bit_sweep("proj_out", acts, weights, fast_config, ((4, 8),))
        assert rows[0].output_error > 0.0


class TestWeightErrorBenchmark:
    """Tests for weight_error_benchmark."""

    def test_counts_and_determinism(self, fast_config):
        """Test every matrix is scored and reruns agree."""
        spec = SyntheticSpec(rows=16, cols=32, seed=5)
        first = weight_error_benchmark(3, spec, 3, fast_config)
        second = weight_error_benchmark(3, spec, 3, fast_config)
        assert first.count == 3
        assert 0 <= first.wins <= 3
        assert all(e > 0.0 for e in first.tlq_errors + first.uniform_errors)
        assert first.to_dict() == second.to_dict()

    def test_seeds_differ_per_matrix(self, fast_config):
        """Test matrix k uses seed + k."""
        spec = SyntheticSpec(rows=8, cols=16, seed=0)
        result = weight_error_benchmark(2, spec, 3, fast_config)
        shifted = weight_error_benchmark(1, SyntheticSpec(rows=8, cols=16, seed=1), 3, fast_config)
        assert result.tlq_errors[1] == shifted.tlq_errors[0]
        assert result.tlq_errors[0] != result.tlq_errors[1]
