"""
Error reports.

A report directory holds:

    layers.csv     one row per layer, sorted by name
    ablation.csv   four rows per layer (when requested)
    sweep.csv      one row per layer and W/A setting (when requested)
    summary.json   config, aggregates, and the same rows as JSON

Output is deterministic: rerunning on the same inputs gives identical bytes.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from lowbit_quant.config import QuantConfig
from lowbit_quant.core import dual_fraction, evaluate_layer
from lowbit_quant.errors import TensorIOError
from lowbit_quant.models import (
    AblationRow,
    BenchmarkResult,
    LayerReport,
    Scheme,
    SweepRow,
    SyntheticSpec,
)
from lowbit_quant.quantizers import get_quantizer
from lowbit_quant.synthetic import gen_gaussian_longtail

logger = logging.getLogger(__name__)

# W/A settings of the bit-width sweep
DEFAULT_SWEEP = ((3, 4), (3, 6), (3, 8), (4, 4), (4, 6), (4, 8))


def _write_csv(path: Path, columns: tuple[str, ...], rows: list[dict[str, Any]]) -> None:
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def summarize(reports: list[LayerReport]) -> dict[str, Any]:
    """Aggregates over non-skipped layers."""
    active = [r for r in reports if not r.skipped]
    summary: dict[str, Any] = {
        "layers": len(reports),
        "skipped": len(reports) - len(active),
        "dual_fraction": dual_fraction(reports),
        "tlq_wins": sum(r.weight_error_tlq < r.weight_error_uniform for r in active),
    }
    for key in ("weight_error_uniform", "weight_error_tlq", "output_error"):
        values = [getattr(r, key) for r in active]
        summary[f"mean_{key}"] = float(np.mean(values)) if values else 0.0
    return summary


def report_errors(
    reports: list[LayerReport],
    out_dir: Path,
    config: QuantConfig | None = None,
    ablation: list[AblationRow] | None = None,
    sweep: list[SweepRow] | None = None,
    benchmark: BenchmarkResult | None = None,
) -> list[Path]:
    """
    Write the CSV tables and the JSON summary.

    Returns:
        Paths written, in write order
    """
    out_dir = Path(out_dir)
    ordered = sorted(reports, key=lambda r: r.name)
    document: dict[str, Any] = {
        "config": (config or QuantConfig()).to_dict(),
        "summary": summarize(ordered),
        "layers": [r.as_row() for r in ordered],
    }
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "layers.csv"
        _write_csv(path, LayerReport.COLUMNS, document["layers"])
        written.append(path)

        if ablation is not None:
            rows = [r.as_row() for r in ablation]
            path = out_dir / "ablation.csv"
            _write_csv(path, AblationRow.COLUMNS, rows)
            written.append(path)
            document["ablation"] = rows
        if sweep is not None:
            rows = [r.as_row() for r in sweep]
            path = out_dir / "sweep.csv"
            _write_csv(path, SweepRow.COLUMNS, rows)
            written.append(path)
            document["sweep"] = rows
        if benchmark is not None:
            document["benchmark"] = benchmark.to_dict()

        path = out_dir / "summary.json"
        path.write_text(json.dumps(document, sort_keys=True, indent=2) + "\n")
        written.append(path)
    except OSError as e:
        raise TensorIOError(f"cannot write report under {out_dir}: {e.strerror}") from e

    logger.info("report: %d layer(s) -> %s", len(ordered), out_dir)
    return written


def bit_sweep(
    name: str,
    acts: np.ndarray,
    weights: np.ndarray,
    config: QuantConfig,
    settings: tuple[tuple[int, int], ...] = DEFAULT_SWEEP,
) -> list[SweepRow]:
    """Evaluate one layer at every (bits_w, bits_a) setting."""
    rows = []
    for bits_w, bits_a in settings:
        cfg = config.with_overrides(bits_w=bits_w, bits_a=bits_a, skip_layers=[])
        report = evaluate_layer(name, acts, weights, cfg)
        weight_error = (
            report.weight_error_tlq if cfg.scheme is Scheme.TLQ else report.weight_error_uniform
        )
        rows.append(
            SweepRow(
                layer=name,
                setting=f"W{bits_w}A{bits_a}",
                bits_w=bits_w,
                bits_a=bits_a,
                scheme=cfg.scheme,
                weight_error=weight_error,
                output_error=report.output_error,
            )
        )
    return rows


def weight_error_benchmark(
    count: int,
    spec: SyntheticSpec,
    bits: int = 3,
    config: QuantConfig | None = None,
) -> BenchmarkResult:
    """
    Twin-log vs per-channel uniform error on seeded long-tail matrices.

    Matrix k uses seed spec.seed + k.
    """
    config = config or QuantConfig()
    tlq = get_quantizer(Scheme.TLQ, config.clip_grid)
    uniform = get_quantizer(Scheme.UNIFORM)
    result = BenchmarkResult(bits=bits)
    for k in range(count):
        weights = gen_gaussian_longtail(
            SyntheticSpec(
                rows=spec.rows,
                cols=spec.cols,
                sigma=spec.sigma,
                tail_fraction=spec.tail_fraction,
                tail_scale=spec.tail_scale,
                seed=spec.seed + k,
            )
        )
        result.tlq_errors.append(tlq.weight_error(weights, bits))
        result.uniform_errors.append(uniform.weight_error(weights, bits))
    logger.info("benchmark: twin-log wins %d / %d", result.wins, result.count)
    if not result.tlq_ahead:
        logger.warning(
            "benchmark: per-channel uniform is ahead at %d bits (mean error ratio %.2f)",
            bits,
            result.mean_error_ratio,
        )
    return result
