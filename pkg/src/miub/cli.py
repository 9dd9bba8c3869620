"""Command-line entry point.

Subcommands: ``compute`` (metrics from capture files), ``simulate`` (toy
model grid), ``fit`` (scaling-law fit of a CSV), ``plot`` (figures from a
report CSV), ``selftest`` (built-in checks).

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure (non-convergence or divergence).  All outputs are written
atomically and depend only on inputs and seeds.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .aggregate import aggregate
from .capture import CaptureFormatError, read_capture_set, write_capture_set
from .joint import QuantizationSpec
from .report import (atomic_write_text, read_csv_rows, report_json,
                     write_combined_report_csv,
                     write_per_module_csv, write_report_csv,
                     write_scaling_csv)
from .scaling import ScalingObservation, fit_scaling_law
from .selftest import run_selftest
from .sim import (DEFAULT_RANK_GRID, DEFAULT_SHARE_GRID, ToySimConfig,
                  run_scaling_grid)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _build_parser() -> _Parser:
    parser = _Parser(prog="miub", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    compute = sub.add_parser("compute", help="metrics from a capture directory")
    compute.add_argument("--captures", required=True,
                         help="directory holding manifest.jsonl + captures.bin")
    compute.add_argument("--out", required=True, help="output directory")
    compute.add_argument("--temperature", type=float, default=1.0)
    compute.add_argument("--bins", type=int, default=32)
    cov = compute.add_mutually_exclusive_group()
    cov.add_argument("--strict", dest="mode", action="store_const",
                     const="strict", default="strict")
    cov.add_argument("--lenient", dest="mode", action="store_const",
                     const="lenient")
    compute.add_argument("--format", choices=("csv", "json"), default="csv")

    simulate = sub.add_parser("simulate", help="run the toy-model grid")
    simulate.add_argument("--out", required=True)
    simulate.add_argument("--seed", type=int, action="append",
                          help="repeatable; default 0")
    simulate.add_argument("--grid-rank", type=int, action="append",
                          help=f"repeatable; default {DEFAULT_RANK_GRID}")
    simulate.add_argument("--grid-share", type=int, action="append",
                          help=f"repeatable; default {DEFAULT_SHARE_GRID}")
    simulate.add_argument("--grid-length", action="append",
                          choices=("short", "medium", "long"),
                          help="repeatable; default short")
    simulate.add_argument("--steps", type=int, default=300)
    simulate.add_argument("--temperature", type=float, default=1.0)
    simulate.add_argument("--bins", type=int, default=32)

    fit = sub.add_parser("fit", help="fit the scaling law to a CSV")
    fit.add_argument("csv", help="CSV with header n_params,rank,data_size,miub")
    fit.add_argument("--out", required=True)

    plot = sub.add_parser("plot", help="render figures from a report CSV")
    plot.add_argument("report", help="report CSV produced by compute/simulate")
    plot.add_argument("--out", required=True)

    sub.add_parser("selftest", help="run built-in kernel/estimator checks")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"miub: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help/--version
        return int(exc.code or 0)

    handler = {
        "compute": _cmd_compute,
        "simulate": _cmd_simulate,
        "fit": _cmd_fit,
        "plot": _cmd_plot,
        "selftest": _cmd_selftest,
    }[args.command]
    return handler(args)


def _cmd_compute(args) -> int:
    try:
        cs = read_capture_set(args.captures)
    except CaptureFormatError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DATA
    try:
        report = aggregate(cs, temperature=args.temperature,
                           quantization=QuantizationSpec(bins=args.bins),
                           mode=args.mode)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DATA
    out = Path(args.out)
    if args.format == "json":
        atomic_write_text(out / "report.json", report_json(report))
    else:
        write_report_csv(report, out / "report.csv")
        write_per_module_csv(report, out / "report_per_module.csv")
    return EXIT_OK


def _grid_configs(args):
    seeds = args.seed or [0]
    ranks = args.grid_rank or list(DEFAULT_RANK_GRID)
    shares = args.grid_share or list(DEFAULT_SHARE_GRID)
    lengths = args.grid_length or ["short"]
    for seed, length, share, rank in itertools.product(seeds, lengths,
                                                       shares, ranks):
        yield ToySimConfig(rank=rank, share_k=share, seed=seed,
                           steps=args.steps, length_bin=length)


def _cell_name(cfg: ToySimConfig) -> str:
    return (f"seed{cfg.seed}_rank{cfg.rank}_share{cfg.share_k}"
            f"_{cfg.length_bin}")


def _cmd_simulate(args) -> int:
    try:
        configs = list(_grid_configs(args))
    except ValueError as exc:
        print(f"invalid grid: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    results = run_scaling_grid(configs, temperature=args.temperature,
                               quantization=QuantizationSpec(bins=args.bins))

    observations, reports, cells = [], [], []
    for res in results:
        name = _cell_name(res.config)
        entry = {"cell": name, "seed": res.config.seed,
                 "rank": res.config.rank, "share_k": res.config.share_k,
                 "length_bin": res.config.length_bin}
        if res.error is not None:
            entry["status"] = "error"
            entry["error"] = res.error
            print(f"cell {name} failed: {res.error}", file=sys.stderr)
        else:
            write_capture_set(res.captures, out / "cells" / name)
            observations.append(res.observation)
            reports.append(res.report)
            entry["status"] = "ok"
            entry["aggregate_M_nats"] = res.report.aggregate_m
            entry["effective_n_params"] = res.train_stats.effective_n_params
            entry["final_loss"] = res.train_stats.final_loss
        cells.append(entry)

    manifest = {
        "tool": {"name": "miub", "version": __version__,
                 "numpy": np.__version__},
        "grid": {"seeds": args.seed or [0],
                 "ranks": args.grid_rank or list(DEFAULT_RANK_GRID),
                 "shares": args.grid_share or list(DEFAULT_SHARE_GRID),
                 "lengths": args.grid_length or ["short"],
                 "steps": args.steps, "temperature": args.temperature,
                 "bins": args.bins},
        "cells": cells,
    }
    atomic_write_text(out / "run_manifest.json",
                      json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    if observations:
        write_scaling_csv(observations, out / "scaling.csv")
        write_combined_report_csv(reports, out / "report.csv")
        return EXIT_OK
    print("every grid cell failed", file=sys.stderr)
    return EXIT_NUMERIC


def _cmd_fit(args) -> int:
    try:
        rows = read_csv_rows(args.csv)
    except OSError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DATA
    observations = []
    for i, row in enumerate(rows):
        try:
            observations.append(ScalingObservation(
                n_params=float(row["n_params"]), rank=float(row["rank"]),
                data_size=float(row["data_size"]), miub=float(row["miub"])))
        except KeyError as exc:
            print(f"row {i}: missing column {exc}", file=sys.stderr)
            return EXIT_DATA
        except ValueError as exc:
            print(f"row {i}: {exc}", file=sys.stderr)
            return EXIT_DATA
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fit = fit_scaling_law(observations)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DATA
    notes = [str(w.message) for w in caught]
    for note in notes:
        print(f"warning: {note}", file=sys.stderr)

    payload = dict(asdict(fit))
    payload["n_observations"] = len(observations)
    payload["warnings"] = notes
    payload["input_csv_columns"] = ["n_params", "rank", "data_size", "miub"]
    atomic_write_text(Path(args.out) / "fit.json",
                      json.dumps(payload, sort_keys=True, indent=2) + "\n")
    if not fit.converged:
        print("fit did not converge", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _column(rows, name, cast=float):
    out = []
    for row in rows:
        if name not in row:
            raise KeyError(name)
        out.append(cast(row[name]) if row[name] != "" else None)
    return out


def _mean_by(xs, ys, keys=None):
    # Average ys grouped by (x, key); returns {key: (sorted xs, mean ys)}.
    groups: dict = {}
    for i, (x, y) in enumerate(zip(xs, ys)):
        if y is None or x is None:
            continue
        key = keys[i] if keys is not None else ""
        groups.setdefault(key, {}).setdefault(x, []).append(y)
    return {
        key: (sorted(vals), [float(np.mean(vals[x])) for x in sorted(vals)])
        for key, vals in groups.items()
    }


def _cmd_plot(args) -> int:
    from . import plots

    try:
        rows = read_csv_rows(args.report)
    except OSError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DATA
    if not rows:
        print(f"{args.report}: no data rows", file=sys.stderr)
        return EXIT_DATA
    try:
        agg = _column(rows, "aggregate_M_nats")
        ranks = _column(rows, "rank")
        n_params = _column(rows, "n_params")
        lengths = _column(rows, "length_bin", cast=str)
        shares = _column(rows, "share_k", cast=str)
        ppl = _column(rows, "ppl") if "ppl" in rows[0] else [None] * len(rows)
    except KeyError as exc:
        print(f"{args.report}: missing column {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"{args.report}: {exc}", file=sys.stderr)
        return EXIT_DATA

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    if len({r for r in ranks if r is not None}) >= 2:
        series = _mean_by(ranks, agg, [f"share_k={s}" for s in shares])
        written.append(plots.line_plot(
            series, "adapter rank", "aggregate metric (nats)",
            out / "miub_vs_rank.svg", logx=True))
    if len({n for n in n_params if n is not None}) >= 2:
        series = _mean_by(n_params, agg, [f"rank={_fmt_rank(r)}" for r in ranks])
        written.append(plots.line_plot(
            series, "effective model parameters", "aggregate metric (nats)",
            out / "miub_vs_model_size.svg"))
        if any(p is not None for p in ppl):
            # align on the x values where both metrics are present
            both = [(n, a, p) for n, a, p in zip(n_params, agg, ppl)
                    if n is not None and a is not None and p is not None]
            xs = sorted({n for n, _, _ in both})
            agg_means = [float(np.mean([a for n, a, _ in both if n == x]))
                         for x in xs]
            ppl_means = [float(np.mean([p for n, _, p in both if n == x]))
                         for x in xs]
            if len(xs) >= 2:
                written.append(plots.dual_series_plot(
                    xs, agg_means, ppl_means,
                    "effective model parameters", "aggregate metric (nats)",
                    "perplexity", out / "miub_vs_ppl.svg"))
    bin_order = [b for b in ("short", "medium", "long") if b in set(lengths)]
    if len(bin_order) >= 2:
        by_bin = _mean_by(lengths, agg)[""]
        values = {x: y for x, y in zip(*by_bin)}
        written.append(plots.categorical_plot(
            bin_order, [values[b] for b in bin_order], "length bin",
            "aggregate metric (nats)", out / "miub_vs_length.svg"))

    if not written:
        print("report has no axis with at least two points; nothing to plot",
              file=sys.stderr)
        return EXIT_DATA
    for path in written:
        print(path)
    return EXIT_OK


def _fmt_rank(r) -> str:
    return str(int(r)) if r is not None and float(r).is_integer() else str(r)


def _cmd_selftest(_args) -> int:
    results = run_selftest()
    failed = 0
    for res in results:
        if res.ok:
            print(f"PASS {res.name}")
        else:
            failed += 1
            print(f"FAIL {res.name}: {res.detail}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
