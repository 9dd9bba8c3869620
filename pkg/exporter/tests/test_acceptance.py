"""Cross-boundary acceptance: exporter output through the consuming toolkit."""

import csv
import subprocess
import sys

import pytest

import miub
from miub_exporter import (HookPlan, ReferenceModel, export_captures,
                           export_logprobs, reference_dataset)


@pytest.fixture()
def exported(tmp_path):
    model = ReferenceModel()
    dataset = reference_dataset(n_samples=10)
    out = tmp_path / "exported"
    export_captures(model, dataset, HookPlan(max_samples=10), out)
    export_logprobs(model, dataset, out, max_samples=10)
    return out


def test_cross_boundary_round_trip_validates_clean(exported):
    cs = miub.read_capture_set(exported)
    assert miub.validate(cs) == []
    assert len(cs.captures) == 10 * 12


def test_zeroed_adapters_give_zero_aggregate_through_full_pipeline(
        exported, tmp_path):
    # end to end through the consuming CLI: files in, CSV out
    out = tmp_path / "report"
    proc = subprocess.run(
        [sys.executable, "-m", "miub.cli", "compute", "--captures",
         str(exported), "--out", str(out), "--bins", "8"],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    with open(out / "report.csv", newline="") as fh:
        row = next(csv.DictReader(fh))
    assert float(row["aggregate_M_nats"]) == 0.0
    assert float(row["ppl"]) > 1.0  # sidecar consumed


def test_byte_format_conformance_against_consumer_writer(exported, tmp_path):
    # golden-file check: re-writing the parsed set with the consuming
    # toolkit's writer must reproduce the exporter's bytes exactly
    cs = miub.read_capture_set(exported)
    rewritten = tmp_path / "rewritten"
    miub.write_capture_set(cs, rewritten)
    for name in ("captures.bin", "manifest.jsonl", "logprobs.jsonl"):
        assert (exported / name).read_bytes() == (rewritten / name).read_bytes()


def test_nonzero_adapters_give_nonzero_aggregate(tmp_path):
    import torch

    model = ReferenceModel()
    with torch.no_grad():
        for layer in model.layers:
            layer.ffn_up.lora_b.add_(0.5)
    dataset = reference_dataset(n_samples=6)
    out = tmp_path / "nonzero"
    export_captures(model, dataset, HookPlan(max_samples=6), out)
    cs = miub.read_capture_set(out)
    report = miub.aggregate(cs, quantization=miub.QuantizationSpec(
        bins=8, range_strategy="minmax"))
    assert report.aggregate_m > 0.0
