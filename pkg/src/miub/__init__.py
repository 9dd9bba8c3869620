"""Dependency metrics between frozen and adapter-augmented hidden states.

The package computes per-site Jensen-Shannon divergences between softmaxed
base/adapted hidden states, aggregates them into a per-sample/per-dataset
metric, estimates mutual information and its JS-based bound from pooled
coordinate pairs, fits the three-term power scaling law, and ships a
deterministic toy LoRA transformer for desk-scale experiments.
"""

__version__ = "0.1.0"

from .aggregate import MetricReport, aggregate, compare_metrics, per_module_js
from .capture import (SITES, CaptureFormatError, CaptureSet, ModuleCapture,
                      read_capture_set, validate, write_capture_set)
from .joint import (JointHistogram, QuantizationSpec, miub, mutual_information,
                    quantize_pairs)
from .kernels import (LN2, cross_entropy, entropy, js, kl, perplexity, softmax)
from .scaling import (FitConfig, GoodnessStats, ScalingFitResult,
                      ScalingObservation, fit_scaling_law, goodness, predict)

__all__ = [
    "__version__",
    "MetricReport", "aggregate", "compare_metrics", "per_module_js",
    "SITES", "CaptureFormatError", "CaptureSet", "ModuleCapture",
    "read_capture_set", "validate", "write_capture_set",
    "JointHistogram", "QuantizationSpec", "miub", "mutual_information",
    "quantize_pairs",
    "LN2", "cross_entropy", "entropy", "js", "kl", "perplexity", "softmax",
    "FitConfig", "GoodnessStats", "ScalingFitResult", "ScalingObservation",
    "fit_scaling_law", "goodness", "predict",
]
