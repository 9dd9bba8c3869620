"""Site resolution and forward-hook capture for adapter-wrapped models.

A capture site is any submodule that exposes the frozen projection as a
``.base`` child (so the pre-delta output can be tapped) while the module
itself returns the residual sum.  Hidden states are pooled per sample
(last token or mean over time), converted to float32, and written in the
miub capture format together with a token log-probability sidecar.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np
import torch

from .writer import write_capture_files, write_logprob_sidecar

SITE_KINDS = ("attn_q", "attn_k", "attn_v", "attn_o", "ffn_up", "ffn_down")

DEFAULT_PATTERNS = {kind: rf"(^|\.){kind}$" for kind in SITE_KINDS}

POOLINGS = ("last_token", "mean")


@dataclass(frozen=True)
class HookPlan:
    """Which sites to tap and how to pool their hidden states."""

    site_patterns: dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_PATTERNS))
    pooling: str = "last_token"
    max_samples: int = 64
    dtype_note: str = "float32 storage"

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, "
                             f"got {self.pooling!r}")
        if self.max_samples < 1:
            raise ValueError("max_samples must be >= 1")
        unknown = set(self.site_patterns) - set(SITE_KINDS)
        if unknown:
            raise ValueError(f"unknown site kinds: {sorted(unknown)}")


@dataclass(frozen=True)
class ResolvedSite:
    name: str
    module_id: str
    layer: int
    site: str
    module: torch.nn.Module


def resolve_sites(model: torch.nn.Module, plan: HookPlan) -> list[ResolvedSite]:
    """Match named submodules against the plan; deterministic sorted order.

    A match must expose both tensors of the pair: the module itself (the
    residual sum) and a ``.base`` child (the pre-delta dense output).
    """
    compiled = {kind: re.compile(pat) for kind, pat in plan.site_patterns.items()}
    sites = []
    for name, module in model.named_modules():
        for kind, pattern in compiled.items():
            if pattern.search(name) and hasattr(module, "base"):
                layer = _layer_index(name)
                sites.append(ResolvedSite(
                    name=name, module_id=f"L{layer:02d}.{kind}",
                    layer=layer, site=kind, module=module))
    if not sites:
        available = [n for n, _ in model.named_modules() if n][:40]
        raise ValueError(
            f"no submodule matched site patterns {plan.site_patterns}; "
            f"available module names include: {available}"
        )
    sites.sort(key=lambda s: (s.layer, SITE_KINDS.index(s.site)))
    return sites


def _layer_index(name: str) -> int:
    nums = re.findall(r"\.(\d+)\.", "." + name + ".")
    return int(nums[0]) if nums else 0


def _pool(tensor: torch.Tensor, pooling: str) -> torch.Tensor:
    # tensor is (batch, time, features)
    if pooling == "last_token":
        return tensor[:, -1, :]
    return tensor.mean(dim=1)


def export_captures(model: torch.nn.Module, dataset: torch.Tensor,
                    plan: HookPlan, out_path, meta_overrides: dict | None = None,
                    ) -> list[ResolvedSite]:
    """Run the model under hooks and write capture files to ``out_path``."""
    sites = resolve_sites(model, plan)
    tokens = dataset[: plan.max_samples]
    n_samples = int(tokens.shape[0])

    tapped: dict[str, dict[str, torch.Tensor]] = {s.name: {} for s in sites}
    handles = []

    def base_hook(site_name):
        def hook(_module, _inputs, output):
            tapped[site_name]["base"] = output.detach()
        return hook

    def sum_hook(site_name):
        def hook(_module, _inputs, output):
            tapped[site_name]["adapted"] = output.detach()
        return hook

    for site in sites:
        handles.append(site.module.base.register_forward_hook(
            base_hook(site.name)))
        handles.append(site.module.register_forward_hook(
            sum_hook(site.name)))
    try:
        with torch.no_grad():
            model(tokens)
    finally:
        for handle in handles:
            handle.remove()

    records = []
    for site in sites:
        pair = tapped[site.name]
        if "base" not in pair or "adapted" not in pair:
            raise RuntimeError(f"site {site.name!r} was not tapped during the "
                               "forward pass")
        if pair["base"].shape != pair["adapted"].shape:
            raise ValueError(
                f"site {site.name!r}: pre-delta shape {tuple(pair['base'].shape)} "
                f"does not match residual shape {tuple(pair['adapted'].shape)}"
            )
        base = _pool(pair["base"], plan.pooling).to(torch.float32).numpy()
        adapted = _pool(pair["adapted"], plan.pooling).to(torch.float32).numpy()
        for sid in range(n_samples):
            records.append({
                "sample_id": sid, "module_id": site.module_id,
                "layer": site.layer, "site": site.site,
                "base": base[sid], "adapted": adapted[sid],
            })
    records.sort(key=lambda r: (r["sample_id"], r["module_id"]))

    n_params = sum(p.numel() for p in model.parameters()
                   if not p.requires_grad)
    rank = max((getattr(s.module, "rank", 1) for s in sites), default=1)
    meta = {
        "model_name": type(model).__name__,
        "n_params": int(n_params),
        "lora_rank": int(rank),
        "dataset_size": float(tokens.shape[1]),
        "share_k": 1,
        "length_bin": "unbinned",
        "seed": 0,
        "pooling": plan.pooling,
        "dtype": plan.dtype_note,
    }
    meta.update(meta_overrides or {})
    write_capture_files(records, meta, out_path)
    return sites


def export_logprobs(model: torch.nn.Module, dataset: torch.Tensor,
                    out_path, max_samples: int | None = None) -> None:
    """Write the next-token log-probability sidecar (nats, entries <= 0)."""
    tokens = dataset if max_samples is None else dataset[:max_samples]
    with torch.no_grad():
        logits = model(tokens)
    logprobs = torch.log_softmax(logits.double(), dim=-1)
    per_sample: dict[int, list[float]] = {}
    for sid in range(tokens.shape[0]):
        row = []
        for t in range(tokens.shape[1] - 1):
            lp = float(logprobs[sid, t, tokens[sid, t + 1]])
            if not math.isfinite(lp):
                raise ValueError(
                    f"non-finite log-probability for sample {sid} at "
                    f"position {t}"
                )
            row.append(min(lp, 0.0))
        per_sample[sid] = row
    write_logprob_sidecar(per_sample, out_path)
