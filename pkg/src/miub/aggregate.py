"""Per-module JS divergence between base and adapted states, aggregated.

The headline number is the operational metric: for every sample, sum the JS
divergences between the softmaxed base and adapted hidden states over all
adapter sites, then average over samples.  MI and its JS-based bound over
the pooled coordinate pairs, plus CE/PPL when token log-probabilities are
available, are reported as separate columns for comparison; the MI <= bound
ordering is surfaced as a flag, never asserted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import joint as joint_mod
from . import kernels
from .capture import CaptureSet, ModuleCapture, validate


@dataclass(frozen=True)
class MetricReport:
    """All metrics for one capture set, plus the configuration that made them."""

    per_module_js: dict[str, float]
    per_sample_sum: dict[int, float]
    aggregate_m: float
    mi_estimate: float
    miub_estimate: float
    inequality_satisfied: bool
    ce: float | None
    ppl: float | None
    meta: dict
    n_samples: int
    n_modules: int
    temperature: float
    bins: int
    coverage_mode: str = "strict"
    dropped_modules: tuple[str, ...] = ()

    @property
    def aggregate_m_bits(self) -> float:
        return self.aggregate_m / kernels.LN2


def per_module_js(capture: ModuleCapture, temperature: float = 1.0) -> float:
    """JS divergence between softmax(h_base/T) and softmax(h_adapted/T)."""
    p = kernels.softmax(np.asarray(capture.h_base, dtype=np.float64), temperature)
    q = kernels.softmax(np.asarray(capture.h_adapted, dtype=np.float64), temperature)
    return kernels.js(p, q)


def _resolve_coverage(by_sample: dict[int, dict[str, ModuleCapture]],
                      mode: str) -> tuple[list[str], tuple[str, ...]]:
    module_sets = {sid: frozenset(mods) for sid, mods in by_sample.items()}
    union: set[str] = set().union(*module_sets.values())
    common = frozenset.intersection(*module_sets.values())
    if all(mods == union for mods in module_sets.values()):
        return sorted(union), ()
    if mode == "strict":
        diffs = []
        for sid in sorted(module_sets):
            missing = sorted(union - module_sets[sid])
            if missing:
                diffs.append(f"sample {sid} is missing modules: {', '.join(missing)}")
        raise ValueError(
            "ragged module coverage across samples (strict mode):\n  "
            + "\n  ".join(diffs)
        )
    if not common:
        raise ValueError("lenient mode found no module common to every sample")
    return sorted(common), tuple(sorted(union - common))


def aggregate(cs: CaptureSet, temperature: float = 1.0,
              quantization: joint_mod.QuantizationSpec | None = None,
              mode: str = "strict") -> MetricReport:
    """Compute the full metric report for a capture set.

    ``mode`` controls ragged module coverage: ``strict`` rejects it with a
    per-sample diff, ``lenient`` restricts the computation to the module
    subset common to every sample and records what was dropped.

    The accumulation order is fixed (sorted sample id, then module id), so
    identical inputs produce bit-identical reports.
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"mode must be 'strict' or 'lenient', got {mode!r}")
    if not cs.captures:
        raise ValueError("capture set is empty")
    violations = validate(cs)
    if violations:
        raise ValueError(
            "capture set fails validation:\n  " + "\n  ".join(violations)
        )
    quantization = quantization or joint_mod.QuantizationSpec()

    by_sample: dict[int, dict[str, ModuleCapture]] = {}
    for cap in cs.captures:
        by_sample.setdefault(cap.sample_id, {})[cap.module_id] = cap
    modules, dropped = _resolve_coverage(by_sample, mode)

    sample_ids = sorted(by_sample)
    js_values: dict[str, list[float]] = {m: [] for m in modules}
    per_sample_sum: dict[int, float] = {}
    base_pool: list[np.ndarray] = []
    adapted_pool: list[np.ndarray] = []
    for sid in sample_ids:
        total = 0.0
        for mid in modules:
            cap = by_sample[sid][mid]
            val = per_module_js(cap, temperature)
            js_values[mid].append(val)
            total += val
            base_pool.append(np.asarray(cap.h_base, dtype=np.float64))
            adapted_pool.append(np.asarray(cap.h_adapted, dtype=np.float64))
        per_sample_sum[sid] = total

    per_module = {m: float(np.mean(js_values[m])) for m in modules}
    aggregate_m = float(np.mean([per_sample_sum[s] for s in sample_ids]))

    # Pool every paired coordinate across captures for the joint estimate.
    # The bin count is capped at the pool size so small sets stay estimable.
    o_coords = np.concatenate(base_pool)
    l_coords = np.concatenate(adapted_pool)
    eff_bins = max(2, min(quantization.bins, o_coords.size))
    if eff_bins != quantization.bins:
        quantization = joint_mod.QuantizationSpec(
            bins=eff_bins,
            range_strategy=quantization.range_strategy,
            percentile=quantization.percentile,
        )
    hist = joint_mod.quantize_pairs(o_coords, l_coords, quantization)
    mi = joint_mod.mutual_information(hist)
    bound = joint_mod.miub(hist)

    ce = ppl = None
    if cs.token_logprobs:
        all_lp = np.concatenate([
            np.asarray(cs.token_logprobs[sid], dtype=np.float64)
            for sid in sorted(cs.token_logprobs)
        ])
        ce = float(-all_lp.mean())
        ppl = kernels.perplexity(all_lp)

    return MetricReport(
        per_module_js=per_module,
        per_sample_sum=per_sample_sum,
        aggregate_m=aggregate_m,
        mi_estimate=mi,
        miub_estimate=bound,
        inequality_satisfied=bool(mi <= bound),
        ce=ce,
        ppl=ppl,
        meta=dict(cs.meta),
        n_samples=len(sample_ids),
        n_modules=len(modules),
        temperature=float(temperature),
        bins=eff_bins,
        coverage_mode=mode,
        dropped_modules=dropped,
    )


def compare_metrics(cs: CaptureSet, temperature: float = 1.0,
                    quantization: joint_mod.QuantizationSpec | None = None,
                    mode: str = "strict") -> MetricReport:
    """Aggregate with CE/PPL columns filled from the token-logprob sidecar.

    A missing sidecar is not an error; the report simply carries CE and PPL
    as absent so the remaining columns stay comparable.
    """
    return aggregate(cs, temperature=temperature, quantization=quantization,
                     mode=mode)
