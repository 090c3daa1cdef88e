"""Command-line interface: quantize, eval, sweep, make-fixture.

Exit codes: 0 success, 1 runtime error (I/O, malformed containers,
shape mismatches), 2 quantization-domain error (degenerate layers,
accumulator overflow), 64 usage error.  All commands are deterministic
functions of their arguments and input files.  MCQ_THREADS bounds
sweep parallelism.
"""

from __future__ import annotations

import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click

from .container import load_dataset, load_model, save_quantized
from .fixtures import FIXTURE_KINDS, write_fixture
from .inference import (
    AccumulatorOverflowError,
    evaluate_full_precision,
    evaluate_quantized,
)
from .model import BATCHNORM, ModelFormatError, fold_batchnorm
from .normalize import DegenerateDistributionError
from .quantize import SamplingConfig, quantize_model

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_DOMAIN = 2
EXIT_USAGE = 64


class _UsageError(ValueError):
    pass


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except _UsageError as e:
        _fail(EXIT_USAGE, str(e))
    except (DegenerateDistributionError, AccumulatorOverflowError) as e:
        _fail(EXIT_DOMAIN, str(e))
    except (ModelFormatError, FileNotFoundError, ValueError, OSError) as e:
        _fail(EXIT_RUNTIME, str(e))


def _build_config(k, k_activations, seed, sort, granularity, skip_first, skip_last) -> SamplingConfig:
    if k <= 0 or (k_activations is not None and k_activations <= 0):
        raise _UsageError("sampling ratio --k must be > 0")
    try:
        return SamplingConfig(
            k_weights=k,
            k_activations=k_activations if k_activations is not None else k,
            seed=seed,
            sort=sort,
            granularity=granularity,
            skip_first_layer=skip_first,
            skip_last_layer=skip_last,
        )
    except ValueError as e:
        raise _UsageError(str(e))


def _load_folded(model_path: str):
    model = load_model(model_path)
    if any(l.kind == BATCHNORM for l in model.layers):
        model = fold_batchnorm(model)
    return model


def _parse_k_grid(text: str) -> list[float]:
    """Either a comma list '0.25,0.5,1' or a range 'start:stop:step'."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise _UsageError("k range must look like start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise _UsageError("k range needs step > 0 and stop >= start")
        n_points = int(round((stop - start) / step)) + 1
        grid = [round(start + i * step, 10) for i in range(n_points)]
    else:
        grid = [float(p) for p in text.split(",") if p.strip()]
    if not grid:
        raise _UsageError("empty k grid")
    if any(k <= 0 for k in grid):
        raise _UsageError("all k values must be > 0")
    return grid


def _parse_seeds(text: str) -> list[int]:
    seeds = [int(p) for p in text.split(",") if p.strip()]
    if not seeds:
        raise _UsageError("empty seed list")
    return seeds


@click.group()
def main():
    """Monte Carlo quantization toolkit."""


@main.command()
@click.argument("model_path")
@click.argument("out_path")
@click.option("--k", type=float, default=1.0, show_default=True, help="Samples per weight.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--sort/--no-sort", default=True, show_default=True, help="Sort values before building the CDF.")
@click.option("--skip-first", is_flag=True, help="Keep the first quantizable layer full precision.")
@click.option("--skip-last", is_flag=True, help="Keep the last quantizable layer full precision.")
@click.option(
    "--granularity",
    type=click.Choice(["layer", "neuron"]),
    default="layer",
    show_default=True,
)
@click.option("--report", "report_path", default=None, help="Report JSON path (default: <out>/report.json).")
def quantize(model_path, out_path, k, seed, sort, skip_first, skip_last, granularity, report_path):
    """Quantize a model container into integer hit counts."""

    def run():
        cfg = _build_config(k, None, seed, sort, granularity, skip_first, skip_last)
        model = _load_folded(model_path)
        quantized, report = quantize_model(model, cfg)
        save_quantized(quantized, out_path)
        rpath = Path(report_path) if report_path else Path(out_path) / "report.json"
        rpath.parent.mkdir(parents=True, exist_ok=True)
        rpath.write_text(report.to_json())
        for layer in report.layers:
            if layer.quantized:
                click.echo(
                    f"{layer.name}: {layer.bit_width} bits, "
                    f"N={layer.sample_count}, "
                    f"nonzero {100 * layer.nonzero_fraction:.1f}%"
                )
            else:
                click.echo(f"{layer.name}: fp32 (skipped)")
        click.echo(
            f"avg weight bits: {report.avg_weight_bits:.2f}  "
            f"weight sparsity: {100 * report.weight_sparsity:.1f}%"
        )
        click.echo(f"wrote {out_path} and {rpath}")

    _guarded(run)


@main.command("eval")
@click.argument("model_path")
@click.argument("dataset_path")
@click.option("--quantize-activations", is_flag=True, help="Quantize activations online during inference.")
@click.option("--quantize-input", is_flag=True, help="Also quantize the raw network input.")
@click.option("--k-a", type=float, default=None, help="Samples per activation (default 1.0).")
@click.option("--seed", type=int, default=0, show_default=True, help="Activation sampling seed.")
@click.option("--deferred", is_flag=True, help="Deferred-rescaling integer pipeline.")
@click.option("--baseline", type=float, default=None, help="Baseline accuracy (percent) for the delta.")
@click.option("--out", "out_path", default=None, help="Write the result as JSON.")
def eval_cmd(model_path, dataset_path, quantize_activations, quantize_input, k_a, seed, deferred, baseline, out_path):
    """Top-1 accuracy of a model container on a dataset container."""

    def run():
        if k_a is not None and k_a <= 0:
            raise _UsageError("--k-a must be > 0")
        model = _load_folded(model_path)
        dataset = load_dataset(dataset_path)
        has_counts = any(l.quantized is not None for l in model.layers)
        if has_counts or quantize_activations:
            cfg = SamplingConfig(k_activations=k_a if k_a is not None else 1.0, seed=seed)
            result = evaluate_quantized(
                model,
                dataset,
                cfg,
                seed=seed,
                quantize_activations=quantize_activations,
                quantize_input=quantize_input,
                deferred=deferred,
            )
        else:
            result = evaluate_full_precision(model, dataset)
        payload = {
            "model": str(model_path),
            "dataset": str(dataset_path),
            "n_samples": result.n_samples,
            "accuracy_pct": round(result.accuracy_pct, 4),
        }
        click.echo(f"top-1 accuracy: {result.accuracy_pct:.4f}% ({result.n_samples} samples)")
        if baseline is not None:
            delta = result.accuracy_pct - baseline
            payload["baseline_pct"] = baseline
            payload["delta_pct"] = round(delta, 4)
            click.echo(f"delta vs baseline: {delta:+.4f} points")
        if result.avg_activation_bits is not None:
            payload["avg_activation_bits"] = round(result.avg_activation_bits, 4)
            payload["activation_nonzero_pct"] = round(
                100 * result.activation_nonzero_fraction, 4
            )
            click.echo(
                f"avg activation bits: {result.avg_activation_bits:.2f}  "
                f"activation nonzero: {100 * result.activation_nonzero_fraction:.1f}%"
            )
        if out_path:
            Path(out_path).parent.mkdir(parents=True, exist_ok=True)
            Path(out_path).write_text(json.dumps(payload, indent=2) + "\n")

    _guarded(run)


_SWEEP_COLUMNS = (
    "k",
    "seed",
    "status",
    "accuracy_pct",
    "avg_weight_bits",
    "avg_activation_bits",
    "weight_nonzero_pct",
    "activation_nonzero_pct",
    "error",
)


def _sweep_cell(model, dataset, k, seed, sort, granularity, skip_first, skip_last, quantize_input):
    cfg = SamplingConfig(
        k_weights=k,
        k_activations=k,
        seed=seed,
        sort=sort,
        granularity=granularity,
        skip_first_layer=skip_first,
        skip_last_layer=skip_last,
    )
    quantized, report = quantize_model(model, cfg)
    result = evaluate_quantized(
        quantized,
        dataset,
        cfg,
        seed=seed,
        quantize_activations=True,
        quantize_input=quantize_input,
    )
    return {
        "k": f"{k:g}",
        "seed": str(seed),
        "status": "ok",
        "accuracy_pct": f"{result.accuracy_pct:.4f}",
        "avg_weight_bits": f"{report.avg_weight_bits:.4f}",
        "avg_activation_bits": f"{result.avg_activation_bits:.4f}",
        "weight_nonzero_pct": f"{100 * report.weight_nonzero_fraction:.4f}",
        "activation_nonzero_pct": f"{100 * result.activation_nonzero_fraction:.4f}",
        "error": "",
    }


@main.command()
@click.argument("model_path")
@click.argument("dataset_path")
@click.option("--k-grid", default="0.25,0.5,1.0,2.0,4.0,8.0", show_default=True, help="Comma list or start:stop:step.")
@click.option("--seeds", default="0", show_default=True, help="Comma-separated seed list.")
@click.option("--sort/--no-sort", default=True, show_default=True)
@click.option("--skip-first", is_flag=True)
@click.option("--skip-last", is_flag=True)
@click.option(
    "--granularity",
    type=click.Choice(["layer", "neuron"]),
    default="layer",
    show_default=True,
)
@click.option("--quantize-input", is_flag=True)
@click.option("--out", "out_path", required=True, help="CSV output path.")
def sweep(model_path, dataset_path, k_grid, seeds, sort, skip_first, skip_last, granularity, quantize_input, out_path):
    """Quantize and evaluate over a (k, seed) grid; one CSV row per cell.

    Cells that fail are recorded as error rows instead of aborting the
    sweep.  Rows appear in grid order regardless of execution order.
    """

    def run():
        grid = _parse_k_grid(k_grid)
        seed_list = _parse_seeds(seeds)
        model = _load_folded(model_path)
        dataset = load_dataset(dataset_path)
        cells = [(k, seed) for k in grid for seed in seed_list]

        def cell(args):
            k, seed = args
            try:
                return _sweep_cell(
                    model, dataset, k, seed, sort, granularity,
                    skip_first, skip_last, quantize_input,
                )
            except Exception as e:  # error rows keep the sweep alive
                return {
                    "k": f"{k:g}",
                    "seed": str(seed),
                    "status": "error",
                    "accuracy_pct": "",
                    "avg_weight_bits": "",
                    "avg_activation_bits": "",
                    "weight_nonzero_pct": "",
                    "activation_nonzero_pct": "",
                    "error": str(e),
                }

        threads = max(1, int(os.environ.get("MCQ_THREADS", "1")))
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rows = list(pool.map(cell, cells))
        else:
            rows = [cell(c) for c in cells]

        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=_SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(buffer.getvalue())
        n_err = sum(1 for r in rows if r["status"] != "ok")
        click.echo(f"wrote {len(rows)} rows to {out}" + (f" ({n_err} errors)" if n_err else ""))

    _guarded(run)


@main.command("make-fixture")
@click.argument("kind", type=click.Choice(FIXTURE_KINDS))
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--out", "out_dir", default=".", show_default=True, help="Directory for the containers.")
def make_fixture_cmd(kind, seed, out_dir):
    """Generate a model container plus a matching dataset container."""

    def run():
        model_path, dataset_path = write_fixture(kind, seed, out_dir)
        click.echo(f"wrote {model_path}")
        click.echo(f"wrote {dataset_path}")

    _guarded(run)


if __name__ == "__main__":
    main()
