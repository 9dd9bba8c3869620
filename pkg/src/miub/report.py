"""CSV/JSON report assembly with atomic file writes.

All writers go through a temp-file + rename, so an interrupted run never
leaves a half-written file at the final path, and all float formatting uses
the shortest round-trip representation, so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

from . import kernels
from .aggregate import MetricReport

REPORT_COLUMNS = (
    "model", "n_params", "rank", "data_size", "share_k", "length_bin",
    "aggregate_M_nats", "aggregate_M_bits", "mi_nats", "miub_nats",
    "inequality_ok", "ce_nats", "ppl", "n_samples", "n_modules",
    "temperature", "bins",
)
PER_MODULE_COLUMNS = ("module_id", "layer", "site", "mean_js_nats",
                      "mean_js_bits")
SCALING_COLUMNS = ("n_params", "rank", "data_size", "miub")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(col)) for col in columns])
    return buf.getvalue()


def report_row(report: MetricReport) -> dict:
    meta = report.meta
    return {
        "model": meta.get("model_name"),
        "n_params": meta.get("n_params"),
        "rank": meta.get("lora_rank"),
        "data_size": meta.get("dataset_size"),
        "share_k": meta.get("share_k"),
        "length_bin": meta.get("length_bin"),
        "aggregate_M_nats": report.aggregate_m,
        "aggregate_M_bits": report.aggregate_m / kernels.LN2,
        "mi_nats": report.mi_estimate,
        "miub_nats": report.miub_estimate,
        "inequality_ok": report.inequality_satisfied,
        "ce_nats": report.ce,
        "ppl": report.ppl,
        "n_samples": report.n_samples,
        "n_modules": report.n_modules,
        "temperature": report.temperature,
        "bins": report.bins,
    }


def per_module_rows(report: MetricReport) -> list[dict]:
    rows = []
    for module_id in sorted(report.per_module_js):
        mean_js = report.per_module_js[module_id]
        layer, site = _split_module_id(module_id)
        rows.append({
            "module_id": module_id,
            "layer": layer,
            "site": site,
            "mean_js_nats": mean_js,
            "mean_js_bits": mean_js / kernels.LN2,
        })
    return rows


def _split_module_id(module_id: str):
    # Toy-simulator ids look like "L03.ffn_up"; anything else degrades
    # gracefully to empty layer/site columns.
    if "." in module_id and module_id.startswith("L"):
        head, _, site = module_id.partition(".")
        try:
            return int(head[1:]), site
        except ValueError:
            pass
    return None, None


def write_report_csv(report: MetricReport, path) -> None:
    atomic_write_text(path, rows_to_csv(REPORT_COLUMNS, [report_row(report)]))


def write_combined_report_csv(reports, path) -> None:
    atomic_write_text(
        path, rows_to_csv(REPORT_COLUMNS, [report_row(r) for r in reports])
    )


def write_per_module_csv(report: MetricReport, path) -> None:
    atomic_write_text(
        path, rows_to_csv(PER_MODULE_COLUMNS, per_module_rows(report))
    )


def write_scaling_csv(observations, path) -> None:
    rows = [
        {"n_params": o.n_params, "rank": o.rank, "data_size": o.data_size,
         "miub": o.miub}
        for o in observations
    ]
    atomic_write_text(path, rows_to_csv(SCALING_COLUMNS, rows))


def report_json(report: MetricReport) -> str:
    payload = dict(report_row(report))
    payload["per_module_js_nats"] = {
        k: report.per_module_js[k] for k in sorted(report.per_module_js)
    }
    payload["per_sample_sum_nats"] = {
        str(k): report.per_sample_sum[k] for k in sorted(report.per_sample_sum)
    }
    payload["coverage_mode"] = report.coverage_mode
    payload["dropped_modules"] = list(report.dropped_modules)
    payload["meta"] = report.meta
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
