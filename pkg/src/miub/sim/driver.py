"""Training loop, hidden-state capture and grid runner for the toy model.

Training is plain SGD on the adapter matrices only; the optimizer choice is
recorded in capture metadata.  Everything is seeded and single-threaded, so
a (config, seed) pair maps to bit-identical weights, captures and reports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..aggregate import MetricReport, aggregate
from ..capture import SITES, CaptureSet, ModuleCapture
from ..joint import QuantizationSpec
from ..scaling import ScalingObservation
from .config import ToySimConfig
from .model import (ToyModel, backward, build_model, effective_base_params,
                    forward, lora_param_count, loss_from_logits)
from .task import TaskDataset, generate_synthetic_task


@dataclass(frozen=True)
class TrainStats:
    per_step_loss: tuple[float, ...]
    initial_loss: float
    final_loss: float
    effective_n_params: int
    lora_param_count: int


def dataset_loss(model: ToyModel, dataset: TaskDataset,
                 batch_size: int = 64) -> float:
    """Mean label cross entropy (nats) over the whole dataset."""
    total = 0.0
    n = dataset.n_samples
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        logits, _ = forward(model, dataset.inputs[start:stop])
        loss, _ = loss_from_logits(logits, dataset.labels[start:stop])
        total += loss * (stop - start)
    return total / n


def train_lora(model: ToyModel, dataset: TaskDataset,
               config: ToySimConfig) -> TrainStats:
    """SGD on the adapter matrices; frozen weights are never touched."""
    rng = np.random.default_rng([config.seed, 3])
    n = dataset.n_samples
    initial_loss = dataset_loss(model, dataset)
    order = rng.permutation(n)
    cursor = 0
    per_step = []
    for step in range(config.steps):
        if cursor + config.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size

        logits, cache = forward(model, dataset.inputs[idx], need_cache=True)
        loss, dlogits = loss_from_logits(logits, dataset.labels[idx])
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"training diverged (non-finite loss) at step {step}"
            )
        per_step.append(loss)
        grads_a, grads_b = backward(model, cache, dlogits)
        for layer in range(config.layers):
            for site in SITES:
                model.lora_a[layer][site] -= config.lr * grads_a[layer][site]
                model.lora_b[layer][site] -= config.lr * grads_b[layer][site]

    final_loss = dataset_loss(model, dataset)
    return TrainStats(
        per_step_loss=tuple(per_step),
        initial_loss=initial_loss,
        final_loss=final_loss,
        effective_n_params=effective_base_params(model),
        lora_param_count=lora_param_count(model),
    )


def capture_hidden(model: ToyModel, dataset: TaskDataset,
                   n_samples: int, pooling: str = "last_token") -> CaptureSet:
    """Record (frozen output, residual sum) per site, pooled over positions.

    The pooling rule (last token by default) is recorded in the metadata.
    Also stores the model's log-probability of each sample's label, which
    feeds the CE/PPL comparison columns downstream.
    """
    cfg = model.config
    n_samples = min(n_samples, dataset.n_samples)
    inputs = dataset.inputs[:n_samples]
    labels = dataset.labels[:n_samples]

    logits, cache = forward(model, inputs, capture_sites=True,
                            capture_pooling=pooling)
    log_probs = logits - logits.max(axis=-1, keepdims=True)
    log_probs = log_probs - np.log(np.exp(log_probs).sum(axis=-1, keepdims=True))
    label_lp = log_probs[np.arange(n_samples), labels]
    token_logprobs = {
        int(sid): [min(float(label_lp[sid]), 0.0)] for sid in range(n_samples)
    }

    captures = []
    for layer, rec in enumerate(cache["site_records"]):
        for site in SITES:
            base, delta = rec[site]
            for sid in range(n_samples):
                captures.append(ModuleCapture(
                    sample_id=sid,
                    module_id=f"L{layer:02d}.{site}",
                    layer_index=layer,
                    site=site,
                    h_base=base[sid],
                    h_adapted=base[sid] + delta[sid],
                ))

    meta = {
        "model_name": "toy-lora-transformer",
        "n_params": effective_base_params(model),
        "lora_rank": cfg.rank,
        "dataset_size": float(dataset.seq_len),
        "share_k": cfg.share_k,
        "length_bin": dataset.length_bin,
        "seed": cfg.seed,
        "pooling": pooling,
        "optimizer": "sgd",
        "lr": cfg.lr,
        "steps": cfg.steps,
    }
    return CaptureSet(captures=captures, meta=meta,
                      token_logprobs=token_logprobs)


@dataclass
class GridCellResult:
    config: ToySimConfig
    observation: ScalingObservation | None = None
    report: MetricReport | None = None
    train_stats: TrainStats | None = None
    captures: CaptureSet | None = None
    error: str | None = None


def run_cell(config: ToySimConfig, temperature: float = 1.0,
             quantization: QuantizationSpec | None = None) -> GridCellResult:
    """build -> share -> train -> capture -> aggregate for one grid cell."""
    model = build_model(config)
    train_ds = generate_synthetic_task(config.seed, config.length_bin,
                                       config.train_samples, config.vocab,
                                       stream="train")
    stats = train_lora(model, train_ds, config)
    eval_ds = generate_synthetic_task(config.seed, config.length_bin,
                                      config.capture_samples, config.vocab,
                                      stream="eval")
    captures = capture_hidden(model, eval_ds, config.capture_samples)
    report = aggregate(captures, temperature=temperature,
                       quantization=quantization)
    observation = ScalingObservation(
        n_params=float(stats.effective_n_params),
        rank=float(config.rank),
        data_size=float(eval_ds.seq_len),
        miub=report.aggregate_m,
    )
    return GridCellResult(config=config, observation=observation,
                          report=report, train_stats=stats, captures=captures)


def run_scaling_grid(configs, temperature: float = 1.0,
                     quantization: QuantizationSpec | None = None,
                     ) -> list[GridCellResult]:
    """Run every cell; a failing cell is recorded and skipped, never fatal."""
    results = []
    for config in configs:
        try:
            results.append(run_cell(config, temperature, quantization))
        except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
            results.append(GridCellResult(config=config, error=str(exc)))
    return results
