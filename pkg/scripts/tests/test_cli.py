"""Tests for the quantize_layers command line."""

import csv
import json

import pytest

from lowbit_quant.cli import CONFIG_KEYS, main
from lowbit_quant.config import CONFIG_ENV_VAR
from lowbit_quant.tensorio import load_tensors, read_corpus

# wide weights keep the salient layer's smoothed J well above 1
SMALL = [
    "--rows", "16", "--cols", "32", "--layers", "2", "--batches", "2", "--tokens", "8",
    "--sigma", "0.2", "--tail-fraction", "0",
]
FAST = ["--clip-alpha", "0.9:1.0:0.05", "--clip-beta", "0.9:1.0:0.05", "-j", "1"]


@pytest.fixture
def corpus(tmp_path):
    """A two-layer synthetic corpus written through the CLI."""
    out = tmp_path / "corpus"
    assert main(["synth", "--out", str(out), *SMALL]) == 0
    return out


class TestArguments:
    """Tests for argument parsing and exit codes."""

    def test_no_command(self):
        """Test a missing subcommand is a usage error."""
        assert main([]) == 2

    def test_bits_out_of_range(self, corpus, tmp_path):
        """Test --bits-w 1 is rejected as a usage error."""
        code = main(["quantize", "--corpus", str(corpus), "--out", str(tmp_path / "q"), "--bits-w", "1"])
        assert code == 2

    def test_bad_clip_grid(self, corpus, tmp_path):
        """Test malformed clip grids are usage errors."""
        code = main(["report", "--corpus", str(corpus), "--out", str(tmp_path / "r"), "--clip-alpha", "0.9"])
        assert code == 2

    def test_help_lists_config_keys(self, capsys):
        """Test --help shows every config key with its default."""
        assert main(["report", "--help"]) == 0
        out = capsys.readouterr().out
        for key in CONFIG_KEYS:
            assert "--" + key.replace("_", "-") in out
        assert "0.85:1.0:0.01" in out

    def test_missing_corpus(self, tmp_path, capsys):
        """Test a missing corpus exits 1 with a diagnostic."""
        code = main(["quantize", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "q")])
        assert code == 1
        assert "Error:" in capsys.readouterr().err

    def test_invalid_config_value(self, corpus, tmp_path, capsys):
        """Test config validation failures exit 1."""
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"block_size": 96}))
        code = main(["report", "--corpus", str(corpus), "--out", str(tmp_path / "r"), "--config", str(config)])
        assert code == 1
        assert "power of two" in capsys.readouterr().err


class TestSynth:
    """Tests for the synth subcommand."""

    def test_layout(self, corpus):
        """Test layer names, shapes and dtypes."""
        layers = read_corpus(corpus)
        assert [layer.name for layer in layers] == ["blocks.0.linear", "blocks.1.linear"]
        assert layers[0].weight.shape == (16, 32)
        assert layers[0].activations.shape == (2, 8, 32)
        assert layers[0].weight.dtype.name == "float32"

    def test_salient_channel_on_even_layers(self, corpus):
        """Test layer 0 carries the salient channel and layer 1 does not."""
        layers = read_corpus(corpus)
        assert abs(layers[0].activations[..., 0]).max() > 100
        assert abs(layers[1].activations).max() < 100

    def test_deterministic(self, corpus, tmp_path):
        """Test the same arguments give identical files."""
        again = tmp_path / "again"
        assert main(["synth", "--out", str(again), *SMALL]) == 0
        for path in sorted(corpus.iterdir()):
            assert (again / path.name).read_bytes() == path.read_bytes()


class TestPipelineCommands:
    """Tests for calibrate, quantize, simulate and report."""

    def test_calibrate(self, corpus, tmp_path):
        """Test calibrate writes smoothing and rotation artifacts."""
        out = tmp_path / "calib"
        assert main(["calibrate", "--corpus", str(corpus), "--out", str(out), *FAST]) == 0
        index = json.loads((out / "index.json").read_text())
        assert [e["name"] for e in index["layers"]] == ["blocks.0.linear", "blocks.1.linear"]
        assert index["layers"][0]["plan"] == "dual"
        for entry in index["layers"]:
            for name in entry["artifacts"].values():
                assert (out / name).exists()

    def test_quantize_simulate(self, corpus, tmp_path, capsys):
        """Test quantize then simulate produces outputs and a report."""
        quant, sim = tmp_path / "quant", tmp_path / "sim"
        assert main(["quantize", "--corpus", str(corpus), "--out", str(quant), *FAST]) == 0
        index = json.loads((quant / "index.json").read_text())
        assert index["config"]["bits_w"] == 3
        assert set(index["layers"][0]["artifacts"]) == {"smoothing", "rotation", "weights", "shift"}

        code = main(["simulate", "--corpus", str(corpus), "--artifacts", str(quant), "--out", str(sim)])
        assert code == 0
        outputs = load_tensors(sim / "outputs.manifest.json")
        assert outputs["blocks.0.linear.output"].shape == (2, 8, 16)
        with (sim / "layers.csv").open(newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["plan_kind"] for r in rows] == ["dual", "hadamard"]
        assert all(0.0 < float(r["output_error"]) < 1.0 for r in rows)
        assert "Simulated 2 layer(s)" in capsys.readouterr().out

    def test_simulate_without_index(self, corpus, tmp_path, capsys):
        """Test simulate needs a quantize directory."""
        code = main(["simulate", "--corpus", str(corpus), "--artifacts", str(tmp_path), "--out", str(tmp_path / "s")])
        assert code == 1
        assert "run 'quantize' first" in capsys.readouterr().err

    def test_simulate_reads_config_file(self, corpus, tmp_path):
        """Test simulate applies --config on top of the saved configuration."""
        quant, sim = tmp_path / "quant", tmp_path / "sim"
        assert main(["quantize", "--corpus", str(corpus), "--out", str(quant), *FAST]) == 0
        config = tmp_path / "a8.json"
        config.write_text(json.dumps({"bits_a": 8}))
        args = ["simulate", "--corpus", str(corpus), "--artifacts", str(quant), "--out", str(sim), "--config", str(config)]
        assert main(args) == 0
        saved = json.loads((sim / "summary.json").read_text())["config"]
        assert saved["bits_a"] == 8
        assert saved["clip_alpha"]["step"] == 0.05

    def test_simulate_reads_env_config(self, corpus, tmp_path, monkeypatch):
        """Test simulate honours $LRQ_CONFIG."""
        quant, sim = tmp_path / "quant", tmp_path / "sim"
        assert main(["quantize", "--corpus", str(corpus), "--out", str(quant), *FAST]) == 0
        config = tmp_path / "a16.json"
        config.write_text(json.dumps({"bits_a": 16}))
        monkeypatch.setenv(CONFIG_ENV_VAR, str(config))
        assert main(["simulate", "--corpus", str(corpus), "--artifacts", str(quant), "--out", str(sim)]) == 0
        assert json.loads((sim / "summary.json").read_text())["config"]["bits_a"] == 16

    def test_report_from_artifacts(self, corpus, tmp_path, capsys):
        """Test report --artifacts evaluates the layers saved by quantize."""
        quant, sim, rep = tmp_path / "quant", tmp_path / "sim", tmp_path / "rep"
        args = ["quantize", "--corpus", str(corpus), "--out", str(quant), "--scheme", "uniform", *FAST]
        assert main(args) == 0
        assert main(["simulate", "--corpus", str(corpus), "--artifacts", str(quant), "--out", str(sim)]) == 0
        assert main(["report", "--corpus", str(corpus), "--artifacts", str(quant), "--out", str(rep)]) == 0
        assert "Evaluating saved layers" in capsys.readouterr().out
        assert json.loads((rep / "summary.json").read_text())["config"]["scheme"] == "uniform"
        with (sim / "layers.csv").open(newline="") as f:
            simulated = list(csv.DictReader(f))
        with (rep / "layers.csv").open(newline="") as f:
            reported = list(csv.DictReader(f))
        assert [r["name"] for r in reported] == [r["name"] for r in simulated]
        assert [r["output_error"] for r in reported] == [r["output_error"] for r in simulated]

    def test_report_artifacts_without_index(self, corpus, tmp_path, capsys):
        """Test report --artifacts needs a quantize directory."""
        args = ["report", "--corpus", str(corpus), "--artifacts", str(tmp_path), "--out", str(tmp_path / "r")]
        assert main(args) == 1
        assert "run 'quantize' first" in capsys.readouterr().err

    def test_skip_layers_flag(self, corpus, tmp_path):
        """Test --skip-layers keeps matching layers unquantized."""
        quant = tmp_path / "quant"
        args = ["quantize", "--corpus", str(corpus), "--out", str(quant), "--skip-layers", "blocks.1", *FAST]
        assert main(args) == 0
        index = json.loads((quant / "index.json").read_text())
        assert [e["skipped"] for e in index["layers"]] == [False, True]

    def test_env_config(self, corpus, tmp_path, monkeypatch):
        """Test $LRQ_CONFIG is read when --config is absent."""
        config = tmp_path / "w4.json"
        config.write_text(json.dumps({"bits_w": 4, "scheme": "uniform"}))
        monkeypatch.setenv(CONFIG_ENV_VAR, str(config))
        quant = tmp_path / "quant"
        assert main(["quantize", "--corpus", str(corpus), "--out", str(quant), *FAST]) == 0
        index = json.loads((quant / "index.json").read_text())
        assert index["config"]["bits_w"] == 4
        assert set(index["layers"][0]["artifacts"]) == {"smoothing", "rotation", "weights"}

    def test_flags_override_config_file(self, corpus, tmp_path):
        """Test command-line flags win over the config file."""
        config = tmp_path / "w4.json"
        config.write_text(json.dumps({"bits_w": 4}))
        quant = tmp_path / "quant"
        args = ["quantize", "--corpus", str(corpus), "--out", str(quant), "--config", str(config), "--bits-w", "2", *FAST]
        assert main(args) == 0
        assert json.loads((quant / "index.json").read_text())["config"]["bits_w"] == 2

    def test_report_with_ablation(self, corpus, tmp_path, capsys):
        """Test report writes the layer and ablation tables."""
        out = tmp_path / "report"
        args = ["report", "--corpus", str(corpus), "--out", str(out), "--ablation", *FAST]
        assert main(args) == 0
        assert (out / "layers.csv").exists()
        with (out / "ablation.csv").open(newline="") as f:
            assert len(list(csv.DictReader(f))) == 8
        summary = json.loads((out / "summary.json").read_text())["summary"]
        assert summary["dual_fraction"] == 0.5
        assert "Report complete: 2 layer(s)" in capsys.readouterr().out

    def test_report_reruns_identically(self, corpus, tmp_path):
        """Test two report runs write identical bytes."""
        contents = []
        for run in ("a", "b"):
            out = tmp_path / run
            assert main(["report", "--corpus", str(corpus), "--out", str(out), *FAST]) == 0
            contents.append([(out / n).read_bytes() for n in ("layers.csv", "summary.json")])
        assert contents[0] == contents[1]
