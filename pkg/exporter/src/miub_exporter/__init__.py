"""Forward-hook exporter: adapter-wrapped torch models -> miub capture files."""

__version__ = "0.1.0"

from .hooks import (DEFAULT_PATTERNS, SITE_KINDS, HookPlan, ResolvedSite,
                    export_captures, export_logprobs, resolve_sites)
from .refmodel import LoraLinear, ReferenceModel, reference_dataset
from .writer import write_capture_files, write_logprob_sidecar

__all__ = [
    "__version__",
    "DEFAULT_PATTERNS", "SITE_KINDS", "HookPlan", "ResolvedSite",
    "export_captures", "export_logprobs", "resolve_sites",
    "LoraLinear", "ReferenceModel", "reference_dataset",
    "write_capture_files", "write_logprob_sidecar",
]
