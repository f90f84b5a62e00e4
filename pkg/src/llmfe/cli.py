"""Command line interface.

Commands: run a search protocol, sweep noise levels, compare finished run
directories, and rerun under an ablation. Configuration comes from a flat
JSON file; every key can be overridden by the flag of the same name, and
built-in defaults fill the rest (flag > file > default). Exit codes: 0 ok,
2 configuration problem, 3 backend unreachable (partial artifacts kept).
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click

from .backend import (
    BackendConfig,
    BackendError,
    HTTP_CHAT,
    SCRIPTED_MOCK,
    make_backend,
)
from .dataset import DatasetError, inject_noise, load_dataset
from .memory import snapshot_text
from .search import (
    ConfigError,
    ProtocolResult,
    SearchConfig,
    canonical_trace,
    run_protocol,
)

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_BACKEND = 3

DEFAULTS: dict = {
    "data_path": "",
    "metadata_path": "",
    "output_dir": "llmfe-out",
    "backend": SCRIPTED_MOCK,
    "endpoint": "",
    "model": "local-model",
    "script_path": "",
    "llm_temperature": 0.8,
    "request_mode": "batched",
    "model_kind": "gradient_boosted_trees",
    "metric": "",
    "islands": 3,
    "batch_size": 3,
    "demonstrations": 2,
    "sample_budget": 20,
    "iterations": 0,  # 0 means: derive from the budget
    "split_seed": 0,
    "search_seed": 0,
    "n_splits": 5,
    "test_fraction": 0.2,
    "val_fraction": 0.2,
    "wall_time_s": 30.0,
    "memory_mb": 2048,
    "n_example_rows": 10,
    "no_domain_knowledge": False,
    "no_data_examples": False,
    "no_evolution": False,
    "noise_sigma": 0.0,
    "noise_seed": 0,
}

ABLATIONS = ("no_domain_knowledge", "no_data_examples", "no_evolution")


def _fail_config(message: str):
    click.echo(f"config error: {message}", err=True)
    sys.exit(EXIT_CONFIG)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        values = json.loads(Path(path).read_text())
    except FileNotFoundError:
        _fail_config(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        _fail_config(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(values, dict):
        _fail_config(f"config file {path} must hold a JSON object")
    unknown = set(values) - set(DEFAULTS)
    if unknown:
        _fail_config(f"unknown config keys {sorted(unknown)}")
    return values


def _resolve(config_path: str | None, overrides: dict) -> dict:
    resolved = dict(DEFAULTS)
    resolved.update(_load_config_file(config_path))
    resolved.update({k: v for k, v in overrides.items() if v is not None})
    return resolved


def _search_config(resolved: dict) -> SearchConfig:
    return SearchConfig(
        model_kind=resolved["model_kind"],
        metric=resolved["metric"] or None,
        islands=int(resolved["islands"]),
        batch_size=int(resolved["batch_size"]),
        demonstrations=int(resolved["demonstrations"]),
        sample_budget=int(resolved["sample_budget"]),
        iterations=int(resolved["iterations"]) or None,
        llm_temperature=float(resolved["llm_temperature"]),
        split_seed=int(resolved["split_seed"]),
        search_seed=int(resolved["search_seed"]),
        test_fraction=float(resolved["test_fraction"]),
        val_fraction=float(resolved["val_fraction"]),
        wall_time_s=float(resolved["wall_time_s"]),
        memory_bytes=int(resolved["memory_mb"]) * 1024**2,
        n_example_rows=int(resolved["n_example_rows"]),
        no_domain_knowledge=bool(resolved["no_domain_knowledge"]),
        no_data_examples=bool(resolved["no_data_examples"]),
        no_evolution=bool(resolved["no_evolution"]),
    )


def _backend_config(resolved: dict) -> BackendConfig:
    return BackendConfig(
        kind=resolved["backend"],
        model=resolved["model"],
        temperature=float(resolved["llm_temperature"]),
        endpoint=resolved["endpoint"],
        script_path=resolved["script_path"],
        sample_budget=int(resolved["sample_budget"]),
        request_mode=resolved["request_mode"],
    )


def _load_inputs(resolved: dict):
    if not resolved["data_path"] or not resolved["metadata_path"]:
        _fail_config("data_path and metadata_path are required")
    for key in ("data_path", "metadata_path"):
        if not Path(resolved[key]).exists():
            _fail_config(f"{key} does not exist: {resolved[key]}")
    try:
        ds = load_dataset(resolved["data_path"], resolved["metadata_path"])
    except DatasetError as exc:
        _fail_config(str(exc))
    if resolved["backend"] == SCRIPTED_MOCK and not resolved["script_path"]:
        _fail_config("scripted_mock backend needs script_path")
    if resolved["backend"] == HTTP_CHAT and not resolved["endpoint"]:
        _fail_config("http_chat backend needs endpoint")
    try:
        cfg = _search_config(resolved)
        backend = make_backend(_backend_config(resolved))
    except (ConfigError, ValueError, BackendError, OSError) as exc:
        _fail_config(str(exc))
    sigma = float(resolved["noise_sigma"])
    if sigma > 0:
        ds = inject_noise(ds, sigma, int(resolved["noise_seed"]))
    return ds, cfg, backend


def _write_resolved(outdir: Path, resolved: dict) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "resolved_config.txt").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n"
    )


SUMMARY_FIELDS = [
    "dataset",
    "n_rows",
    "n_features",
    "metric",
    "direction",
    "split_index",
    "split_seed",
    "search_seed",
    "base",
    "llmfe",
    "best_validation_score",
    "ensemble_size",
    "fallback",
]


def _write_protocol_artifacts(outdir: Path, protocol: ProtocolResult) -> None:
    # an aborted protocol still flushes its trace; summary files need outcomes
    if protocol.outcomes:
        _write_summaries(outdir, protocol)
    with (outdir / "trace.jsonl").open("w") as fh:
        for split_index, result in enumerate(protocol.results):
            for record in result.trace_records():
                record["split_index"] = split_index
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    if protocol.results:
        best_split = max(
            range(len(protocol.results)),
            key=lambda i: (
                protocol.results[i].best.score.ordering,
                -i,
            ),
        )
        best = protocol.results[best_split].best
        (outdir / "best_program.txt").write_text(best.program.source)
        (outdir / "buffer_snapshot.txt").write_text(
            snapshot_text(protocol.results[best_split].buffer)
        )


def _write_summaries(outdir: Path, protocol: ProtocolResult) -> None:
    with (outdir / "summary.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for o in protocol.outcomes:
            writer.writerow(
                {
                    "dataset": protocol.dataset_name,
                    "n_rows": protocol.n_rows,
                    "n_features": protocol.n_features,
                    "metric": protocol.metric,
                    "direction": protocol.direction,
                    "split_index": o.split_index,
                    "split_seed": o.split_seed,
                    "search_seed": o.search_seed,
                    "base": repr(o.base_metric),
                    "llmfe": repr(o.llmfe_metric),
                    "best_validation_score": repr(o.best_score),
                    "ensemble_size": o.ensemble_size,
                    "fallback": o.fallback,
                }
            )
    (outdir / "summary.json").write_text(
        json.dumps(protocol.summary(), indent=2, sort_keys=True) + "\n"
    )


def _echo_summary(protocol: ProtocolResult) -> None:
    s = protocol.summary()
    arrow = "higher is better" if s["direction"] == "max" else "lower is better"
    click.echo(
        f"{s['dataset']}: base {s['metric']} {s['base_mean']:.4f} +- {s['base_std']:.4f}, "
        f"with feature search {s['llmfe_mean']:.4f} +- {s['llmfe_std']:.4f} "
        f"({s['n_splits']} splits, {arrow})"
    )


def _run_and_write(resolved: dict) -> None:
    outdir = Path(resolved["output_dir"])
    _write_resolved(outdir, resolved)
    ds, cfg, backend = _load_inputs(resolved)
    protocol = run_protocol(cfg, ds, backend, n_splits=int(resolved["n_splits"]))
    _write_protocol_artifacts(outdir, protocol)
    if protocol.aborted:
        click.echo(f"backend unreachable: {protocol.aborted}", err=True)
        sys.exit(EXIT_BACKEND)
    _echo_summary(protocol)


def _config_options(fn):
    options = [
        click.option("--config", "config_path", type=str, default=None, help="JSON config file."),
        click.option("--data-path", "data_path", type=str, default=None),
        click.option("--metadata-path", "metadata_path", type=str, default=None),
        click.option("--output-dir", "output_dir", type=str, default=None),
        click.option("--backend", type=click.Choice([SCRIPTED_MOCK, HTTP_CHAT]), default=None),
        click.option("--endpoint", type=str, default=None),
        click.option("--model", type=str, default=None),
        click.option("--script-path", "script_path", type=str, default=None),
        click.option("--llm-temperature", "llm_temperature", type=float, default=None),
        click.option("--request-mode", "request_mode", type=str, default=None),
        click.option("--model-kind", "model_kind", type=str, default=None),
        click.option("--metric", type=str, default=None),
        click.option("--islands", type=int, default=None),
        click.option("--batch-size", "batch_size", type=int, default=None),
        click.option("--demonstrations", type=int, default=None),
        click.option("--sample-budget", "sample_budget", type=int, default=None),
        click.option("--iterations", type=int, default=None),
        click.option("--split-seed", "split_seed", type=int, default=None),
        click.option("--search-seed", "search_seed", type=int, default=None),
        click.option("--n-splits", "n_splits", type=int, default=None),
        click.option("--test-fraction", "test_fraction", type=float, default=None),
        click.option("--val-fraction", "val_fraction", type=float, default=None),
        click.option("--wall-time-s", "wall_time_s", type=float, default=None),
        click.option("--memory-mb", "memory_mb", type=int, default=None),
        click.option("--n-example-rows", "n_example_rows", type=int, default=None),
        click.option("--no-domain-knowledge/--with-domain-knowledge", default=None),
        click.option("--no-data-examples/--with-data-examples", default=None),
        click.option("--no-evolution/--with-evolution", default=None),
        click.option("--noise-sigma", "noise_sigma", type=float, default=None),
        click.option("--noise-seed", "noise_seed", type=int, default=None),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


@click.group()
def main():
    """Evolutionary feature engineering for tabular prediction tasks."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


@main.command("run")
@_config_options
def cmd_run(config_path, **overrides):
    """Run the search protocol and write artifacts to the output directory."""
    resolved = _resolve(config_path, overrides)
    _run_and_write(resolved)


@main.command("noise-sweep")
@click.option(
    "--sigmas",
    default="0,0.01,0.05,0.1",
    show_default=True,
    help="Comma-separated noise levels.",
)
@_config_options
def cmd_noise_sweep(sigmas, config_path, **overrides):
    """Repeat the protocol at several feature-noise levels."""
    resolved = _resolve(config_path, overrides)
    try:
        levels = [float(s) for s in sigmas.split(",") if s.strip() != ""]
    except ValueError:
        _fail_config(f"bad --sigmas value: {sigmas!r}")
    if not levels:
        _fail_config("no sigma values given")
    outdir = Path(resolved["output_dir"])
    _write_resolved(outdir, resolved)

    aggregate_rows = []
    split_rows = []
    for sigma in levels:
        level_resolved = dict(resolved, noise_sigma=sigma)
        ds, cfg, backend = _load_inputs(level_resolved)
        protocol = run_protocol(cfg, ds, backend, n_splits=int(resolved["n_splits"]))
        if protocol.aborted:
            _write_noise_artifacts(outdir, aggregate_rows, split_rows)
            click.echo(f"backend unreachable at sigma={sigma}: {protocol.aborted}", err=True)
            sys.exit(EXIT_BACKEND)
        s = protocol.summary()
        aggregate_rows.append(
            {
                "sigma": sigma,
                "metric": s["metric"],
                "direction": s["direction"],
                "base_mean": repr(s["base_mean"]),
                "base_std": repr(s["base_std"]),
                "llmfe_mean": repr(s["llmfe_mean"]),
                "llmfe_std": repr(s["llmfe_std"]),
            }
        )
        for o in protocol.outcomes:
            split_rows.append(
                {
                    "sigma": sigma,
                    "split_index": o.split_index,
                    "base": repr(o.base_metric),
                    "llmfe": repr(o.llmfe_metric),
                }
            )
        click.echo(
            f"sigma={sigma}: base {s['base_mean']:.4f}, with feature search {s['llmfe_mean']:.4f}"
        )
    _write_noise_artifacts(outdir, aggregate_rows, split_rows)


def _write_noise_artifacts(outdir: Path, aggregate_rows, split_rows) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    if aggregate_rows:
        with (outdir / "noise_sweep.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(aggregate_rows[0].keys()))
            writer.writeheader()
            writer.writerows(aggregate_rows)
    if split_rows:
        with (outdir / "noise_sweep_splits.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(split_rows[0].keys()))
            writer.writeheader()
            writer.writerows(split_rows)


@main.command("report")
@click.argument("run_dirs", nargs=-1, required=True)
@click.option("--csv", "csv_path", type=str, default=None, help="Also write the table as CSV.")
def cmd_report(run_dirs, csv_path):
    """Compare finished run directories: per-dataset metrics and mean ranks."""
    rows = []
    for run_dir in run_dirs:
        summary_path = Path(run_dir) / "summary.json"
        if not summary_path.exists():
            _fail_config(f"no summary.json under {run_dir}")
        try:
            rows.append(json.loads(summary_path.read_text()))
        except json.JSONDecodeError as exc:
            _fail_config(f"{summary_path}: {exc}")

    base_ranks, fe_ranks = [], []
    for s in rows:
        better = max if s["direction"] == "max" else min
        if s["base_mean"] == s["llmfe_mean"]:
            base_ranks.append(1.5)
            fe_ranks.append(1.5)
        elif better(s["base_mean"], s["llmfe_mean"]) == s["base_mean"]:
            base_ranks.append(1.0)
            fe_ranks.append(2.0)
        else:
            base_ranks.append(2.0)
            fe_ranks.append(1.0)

    header = ["dataset", "n", "p", "metric", "base", "llmfe"]
    table = [
        [
            s["dataset"],
            str(s["n_rows"]),
            str(s["n_features"]),
            s["metric"],
            f"{s['base_mean']:.4f} +- {s['base_std']:.4f}",
            f"{s['llmfe_mean']:.4f} +- {s['llmfe_std']:.4f}",
        ]
        for s in rows
    ]
    widths = [max(len(r[i]) for r in [header] + table) for i in range(len(header))]
    click.echo("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in table:
        click.echo("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    mean_base = sum(base_ranks) / len(base_ranks)
    mean_fe = sum(fe_ranks) / len(fe_ranks)
    click.echo(f"mean rank: base {mean_base:.2f}, llmfe {mean_fe:.2f}")

    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(table)
            writer.writerow(["mean_rank", "", "", "", f"{mean_base:.2f}", f"{mean_fe:.2f}"])


@main.command("ablate")
@click.option(
    "--ablation",
    type=click.Choice(ABLATIONS),
    required=True,
    help="Which ingredient to knock out.",
)
@_config_options
def cmd_ablate(ablation, config_path, **overrides):
    """Run the protocol with one ingredient disabled."""
    resolved = _resolve(config_path, overrides)
    resolved[ablation] = True
    _run_and_write(resolved)


if __name__ == "__main__":
    main()
