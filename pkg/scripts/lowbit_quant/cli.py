"""Command-line interface for lowbit_quant."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from lowbit_quant.config import QuantConfig, default_help_values, load_config
from lowbit_quant.console import Colors, banner, error_line
from lowbit_quant.core import (
    INDEX_NAME,
    LayerPipeline,
    load_layer,
    save_layer,
)
from lowbit_quant.errors import LowbitError, ManifestError
from lowbit_quant.models import (
    ActivationSpec,
    LayerReport,
    QuantizedLayer,
    RotationMode,
    Scheme,
    SyntheticSpec,
)
from lowbit_quant.report import bit_sweep, report_errors, weight_error_benchmark
from lowbit_quant.synthetic import gen_activation_batch, gen_gaussian_longtail
from lowbit_quant.tensorio import (
    CorpusLayer,
    read_corpus,
    safe_stem,
    save_artifact,
    save_tensors,
    write_corpus,
)

logger = logging.getLogger(__name__)

CONFIG_KEYS = tuple(QuantConfig().to_dict())


# =============================================================================
# Argument types
# =============================================================================


def _bits(low: int, high: int):
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid bit width: {text!r}")
        if not low <= value <= high:
            raise argparse.ArgumentTypeError(f"bit width must be in [{low}, {high}], got {value}")
        return value

    return parse


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _clip_grid(text: str) -> dict[str, float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"clip grid must be START:STOP:STEP, got {text!r}")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"clip grid must be numeric, got {text!r}")
    return {"start": start, "stop": stop, "step": step}


def _name_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _index_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in _name_list(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# =============================================================================
# Parser
# =============================================================================


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per QuantConfig key; only flags given on the command line override."""
    d = default_help_values()
    group = parser.add_argument_group("quantization settings")
    s = argparse.SUPPRESS
    group.add_argument("--bits-w", type=_bits(2, 8), default=s, help=f"Weight bits (default: {d['bits_w']})")
    group.add_argument("--bits-a", type=_bits(2, 16), default=s, help=f"Activation bits, 16 = float passthrough (default: {d['bits_a']})")
    group.add_argument("--scheme", choices=[m.value for m in Scheme], default=s, help=f"Weight scheme (default: {d['scheme']})")
    group.add_argument("--rotation-mode", choices=[m.value for m in RotationMode], default=s, help=f"Rotation mode (default: {d['rotation_mode']})")
    group.add_argument("--threshold", type=float, default=s, help=f"J threshold for the dual transform (default: {d['threshold']})")
    group.add_argument("--migration-strength", type=float, default=s, help=f"Smoothing migration strength (default: {d['migration_strength']})")
    group.add_argument("--shift-precision", type=_positive_int, default=s, help=f"Integerization factor exponent I (default: {d['shift_precision']})")
    group.add_argument("--clip-alpha", type=_clip_grid, default=s, help=f"Positive-side clip grid START:STOP:STEP (default: {d['clip_alpha']})")
    group.add_argument("--clip-beta", type=_clip_grid, default=s, help=f"Negative-side clip grid START:STOP:STEP (default: {d['clip_beta']})")
    group.add_argument("--block-size", type=_positive_int, default=s, help=f"Rotation block size, a power of two (default: {d['block_size']})")
    group.add_argument("--steps-k", type=int, default=s, help=f"Greedy rotation steps per block (default: {d['steps_k']})")
    group.add_argument("--skip-layers", type=_name_list, default=s, help=f"Comma-separated full-precision layer patterns (default: {d['skip_layers']})")
    group.add_argument("--calib-batches", type=_positive_int, default=s, help=f"Calibration batches per layer (default: {d['calib_batches']})")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (default: $LRQ_CONFIG if set)")
    common.add_argument("--jobs", "-j", type=_positive_int, default=os.cpu_count() or 1, help="Layers processed in parallel (default: CPU count)")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging on stderr")
    _add_config_flags(common)

    parser = argparse.ArgumentParser(
        description="Low-bit post-training quantization of linear layers",
        prog="quantize_layers",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="Write a synthetic layer corpus")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.add_argument("--rows", type=_positive_int, default=128, help="Output channels per layer (default: 128)")
    p.add_argument("--cols", type=_positive_int, default=128, help="Input channels per layer (default: 128)")
    p.add_argument("--sigma", type=float, default=0.02, help="Weight standard deviation (default: 0.02)")
    p.add_argument("--tail-fraction", type=float, default=0.01, help="Fraction of weights in the long tail (default: 0.01)")
    p.add_argument("--tail-scale", type=float, default=8.0, help="Tail multiplier (default: 8)")
    p.add_argument("--seed", type=int, default=0, help="Base seed (default: 0)")
    p.add_argument("--layers", type=_positive_int, default=4, help="Number of layers (default: 4)")
    p.add_argument("--batches", type=_positive_int, default=8, help="Activation batches per layer (default: 8)")
    p.add_argument("--tokens", type=_positive_int, default=16, help="Tokens per batch (default: 16)")
    p.add_argument("--act-sigma", type=float, default=1.0, help="Activation standard deviation (default: 1)")
    p.add_argument("--salient-peak", type=float, default=245.0, help="Peak of salient channels (default: 245)")
    p.add_argument("--salient-channels", type=_index_list, default=(0,), help="Salient channel indices of even-numbered layers (default: 0)")
    p.add_argument("--mild-fraction", type=float, default=0.01, help="Mild outlier fraction of odd-numbered layers (default: 0.01)")

    for name, text in (
        ("calibrate", "Compute smoothing factors and rotation plans"),
        ("quantize", "Calibrate and quantize every layer of a corpus"),
        ("report", "Evaluate a corpus and write CSV/JSON error reports"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--corpus", type=Path, required=True, help="Corpus directory or manifest")
        p.add_argument("--out", type=Path, required=True, help="Output directory")
        if name == "report":
            p.add_argument("--artifacts", type=Path, help="Report on the layers saved by 'quantize' instead of re-quantizing")
            p.add_argument("--ablation", action="store_true", help="Add the twin-log x rotation ablation")
            p.add_argument("--sweep", action="store_true", help="Add the W3/W4 x A4/A6/A8 bit sweep")
            p.add_argument("--benchmark", type=_positive_int, metavar="N", help="Add an N-matrix synthetic weight-error benchmark")

    p = sub.add_parser("simulate", parents=[common], help="Run quantized layers and report output error")
    p.add_argument("--corpus", type=Path, required=True, help="Corpus directory or manifest")
    p.add_argument("--artifacts", type=Path, required=True, help="Directory written by 'quantize'")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    return parser


def _overrides(parsed: argparse.Namespace) -> dict[str, Any]:
    return {key: getattr(parsed, key) for key in CONFIG_KEYS if hasattr(parsed, key)}


# =============================================================================
# Subcommands
# =============================================================================


def _print_layers(reports: list[LayerReport]) -> None:
    print(Colors.cyan("[Layers]"))
    print(f"  {'layer':<28} {'plan':<9} {'J':>9} {'uniform':>10} {'tlq':>10} {'out err':>10}")
    for r in reports:
        if r.skipped:
            print(Colors.yellow(f"  {r.name:<28} {'skipped':<9}"))
            continue
        print(
            f"  {r.name:<28} {r.plan_kind:<9} {r.J:>9.4f} "
            f"{r.weight_error_uniform:>10.5f} {r.weight_error_tlq:>10.5f} {r.output_error:>10.5f}"
        )
    print()


def cmd_synth(parsed: argparse.Namespace) -> int:
    layers = []
    for i in range(parsed.layers):
        seed = parsed.seed + 1000 * i
        weight = gen_gaussian_longtail(
            SyntheticSpec(
                rows=parsed.rows,
                cols=parsed.cols,
                sigma=parsed.sigma,
                tail_fraction=parsed.tail_fraction,
                tail_scale=parsed.tail_scale,
                seed=seed,
            )
        )
        salient = i % 2 == 0
        acts = gen_activation_batch(
            ActivationSpec(
                batches=parsed.batches,
                tokens=parsed.tokens,
                channels=parsed.cols,
                sigma=parsed.act_sigma,
                salient_channels=parsed.salient_channels if salient else (),
                salient_peak=parsed.salient_peak,
                mild_fraction=0.0 if salient else parsed.mild_fraction,
                seed=seed + 1,
            )
        )
        layers.append(CorpusLayer(name=f"blocks.{i}.linear", weight=weight, activations=acts))
    path = write_corpus(layers, parsed.out)
    print(Colors.green(f"Wrote {len(layers)} layer(s): {path}"))
    return 0


def cmd_calibrate(parsed: argparse.Namespace, config: QuantConfig) -> int:
    layers = read_corpus(parsed.corpus)
    pipeline = LayerPipeline(config, jobs=parsed.jobs)
    results = pipeline.calibrate(layers)
    entries = []
    print(Colors.cyan("[Calibration]"))
    for layer, (smoothing, plan, stats) in zip(layers, results):
        stem = safe_stem(layer.name)
        files = {
            "smoothing": save_artifact(smoothing, parsed.out, f"{stem}.smoothing").name,
            "rotation": save_artifact(plan, parsed.out, f"{stem}.rotation").name,
        }
        entries.append({"name": layer.name, "J": stats.J, "plan": plan.kind.value, "artifacts": files})
        print(f"  {layer.name:<28} J={stats.J:<10.4f} plan={plan.kind.value}")
    _write_index(parsed.out, config, entries)
    print()
    print(Colors.green(f"Calibrated {len(layers)} layer(s) -> {parsed.out}"))
    return 0


def _write_index(directory: Path, config: QuantConfig, entries: list[dict]) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    document = {"config": config.to_dict(), "layers": entries}
    (Path(directory) / INDEX_NAME).write_text(json.dumps(document, sort_keys=True, indent=2) + "\n")


def cmd_quantize(parsed: argparse.Namespace, config: QuantConfig) -> int:
    layers = read_corpus(parsed.corpus)
    quantized = LayerPipeline(config, jobs=parsed.jobs).quantize(layers)
    parsed.out.mkdir(parents=True, exist_ok=True)
    entries = [save_layer(q, parsed.out) for q in quantized]
    _write_index(parsed.out, config, entries)
    skipped = sum(q.skipped for q in quantized)
    print(Colors.cyan("[Quantization]"))
    for q in quantized:
        label = "full precision" if q.skipped else f"{q.scheme.value} W{config.bits_w}, plan {q.plan_kind}"
        print(f"  {q.name:<28} {label}")
    print()
    print(Colors.green(f"Quantized {len(quantized) - skipped} layer(s), kept {skipped} -> {parsed.out}"))
    return 0


def _read_index(directory: Path) -> dict:
    path = Path(directory) / INDEX_NAME
    try:
        document = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ManifestError(f"no {INDEX_NAME} in {directory}; run 'quantize' first") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON ({e.msg})") from e
    return document


def _index_config(directory: Path) -> QuantConfig:
    """The configuration a 'quantize' run recorded in its index."""
    index = _read_index(directory)
    if not isinstance(index.get("config"), dict):
        raise ManifestError(f"{Path(directory) / INDEX_NAME}: missing 'config'")
    return QuantConfig.from_dict(index["config"])


def _load_saved_layers(directory: Path, layers: list[CorpusLayer]) -> list[QuantizedLayer]:
    """Rebuild every layer listed in a 'quantize' index against its corpus weights."""
    corpus = {layer.name: layer for layer in layers}
    quantized = []
    for entry in _read_index(directory).get("layers", []):
        name = entry["name"]
        if name not in corpus:
            raise ManifestError(f"layer '{name}' from {directory} is not in the corpus")
        quantized.append(load_layer(entry, directory, corpus[name].weight))
    return quantized


def cmd_simulate(parsed: argparse.Namespace, config: QuantConfig) -> int:
    layers = read_corpus(parsed.corpus)
    quantized = _load_saved_layers(parsed.artifacts, layers)
    results = LayerPipeline(config, jobs=parsed.jobs).evaluate_saved(quantized, layers)

    outputs = {f"{q.name}.output": out.astype(np.float32) for q, (out, _) in zip(quantized, results)}
    reports = sorted((report for _, report in results), key=lambda r: r.name)
    save_tensors(outputs, parsed.out, "outputs")
    report_errors(reports, parsed.out, config)
    print(banner("Simulation"))
    _print_layers(reports)
    print(Colors.green(f"Simulated {len(reports)} layer(s) -> {parsed.out}"))
    return 0


def cmd_report(parsed: argparse.Namespace, config: QuantConfig) -> int:
    layers = read_corpus(parsed.corpus)
    pipeline = LayerPipeline(config, jobs=parsed.jobs)
    if parsed.artifacts is not None:
        print(Colors.yellow(f"Evaluating saved layers from {parsed.artifacts}..."))
        quantized = _load_saved_layers(parsed.artifacts, layers)
        results = pipeline.evaluate_saved(quantized, layers)
        reports = sorted((report for _, report in results), key=lambda r: r.name)
    else:
        print(Colors.yellow("Evaluating layers..."))
        reports = pipeline.run(layers)
    ablation = pipeline.ablation(layers) if parsed.ablation else None
    sweep = None
    if parsed.sweep:
        sweep = [
            row
            for layer in sorted(layers, key=lambda layer: layer.name)
            if not config.is_skipped(layer.name)
            for row in bit_sweep(layer.name, layer.activations, layer.weight, config)
        ]
    benchmark = None
    if parsed.benchmark:
        benchmark = weight_error_benchmark(
            parsed.benchmark, SyntheticSpec(rows=128, cols=128), config.bits_w, config
        )
    paths = report_errors(reports, parsed.out, config, ablation, sweep, benchmark)

    print(banner("Quantization Error Report"))
    _print_layers(reports)
    if ablation:
        print(Colors.cyan("[Ablation]"))
        for row in ablation:
            print(f"  {row.layer:<28} {row.label:<8} out err {row.output_error:.5f}")
        print()
    if benchmark:
        print(Colors.cyan("[Benchmark]"))
        print(f"  twin-log beats uniform on {benchmark.wins}/{benchmark.count} matrices")
        if not benchmark.tlq_ahead:
            print(Colors.yellow(
                f"  per-channel uniform is ahead on this distribution "
                f"(twin-log / uniform mean error {benchmark.mean_error_ratio:.2f})"
            ))
        print()
    print("=" * 60)
    for path in paths:
        print(f"  {path}")
    print(Colors.green(f"Report complete: {len(reports)} layer(s)"))
    return 0


def main(args: list[str] | None = None) -> int:
    """Main entry point."""
    parser = build_parser()
    try:
        parsed = parser.parse_args(args)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2

    logging.basicConfig(
        level=logging.DEBUG if parsed.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        if parsed.command == "synth":
            return cmd_synth(parsed)
        # saved runs start from the configuration recorded in their index
        artifacts = getattr(parsed, "artifacts", None)
        base = _index_config(artifacts) if artifacts is not None else None
        config = load_config(parsed.config, _overrides(parsed), base)
        if parsed.command == "simulate":
            return cmd_simulate(parsed, config)
        if parsed.command == "calibrate":
            return cmd_calibrate(parsed, config)
        if parsed.command == "quantize":
            return cmd_quantize(parsed, config)
        return cmd_report(parsed, config)
    except (LowbitError, OSError) as e:
        print(error_line(str(e)), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
