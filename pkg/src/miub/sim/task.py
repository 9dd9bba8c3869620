"""Keyed associative-recall task with length bins.

Every sequence hides (key, value) bigrams among filler tokens, repeats the
key as a query at the second-to-last position, and ends with the value,
which is the label the model must emit.  Evidence density grows with the
length bin, so a longer prompt is a more informative one; the mapping from
sequence to label stays deterministic because key tokens never occur as
filler.  Labels are assigned round-robin over a seeded permutation of the
value alphabet, keeping label counts balanced to within one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LENGTH_BINS

KEY_LO, N_KEYS = 2, 16
VALUE_LO, N_VALUES = 18, 16
FILLER_LO = 34
MIN_VOCAB = 40

# Evidence bigrams per sequence.  Density doubles per bin, so longer
# sequences are systematically more informative, not just longer.
REPS_PER_BIN = {"short": 1, "medium": 6, "long": 24}


@dataclass(frozen=True)
class TaskDataset:
    """Token sequences whose final token is the label."""

    tokens: np.ndarray        # (n_samples, seq_len) int64
    length_bin: str
    seed: int

    @property
    def n_samples(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def labels(self) -> np.ndarray:
        return self.tokens[:, -1]


def generate_synthetic_task(seed: int, length_bin: str, n_samples: int,
                            vocab: int = 64, stream: str = "train") -> TaskDataset:
    """Generate a deterministic dataset for one length bin.

    ``stream`` namespaces the random draw so that e.g. train and eval
    splits of the same seed do not overlap.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if length_bin not in LENGTH_BINS:
        raise ValueError(f"unknown length bin {length_bin!r}")
    if vocab < MIN_VOCAB:
        raise ValueError(f"vocab must be >= {MIN_VOCAB}, got {vocab}")

    seq_len = LENGTH_BINS[length_bin]
    n_rep = REPS_PER_BIN[length_bin]
    rng = np.random.default_rng([seed, 2, _stream_tag(stream)])

    value_order = rng.permutation(N_VALUES)
    tokens = rng.integers(FILLER_LO, vocab, size=(n_samples, seq_len),
                          dtype=np.int64)

    region = seq_len - 3          # bigram positions stay clear of query/label
    block = region // n_rep
    for i in range(n_samples):
        key = KEY_LO + int(rng.integers(N_KEYS))
        value = VALUE_LO + int(value_order[i % N_VALUES])
        for rep in range(n_rep):
            p = rep * block + int(rng.integers(block - 1))
            tokens[i, p] = key
            tokens[i, p + 1] = value
        tokens[i, seq_len - 2] = key
        tokens[i, seq_len - 1] = value

    return TaskDataset(tokens=tokens, length_bin=length_bin, seed=seed)


def _stream_tag(stream: str) -> int:
    # Stable small integer per stream name for seeding.
    return sum(ord(ch) * (31 ** k) for k, ch in enumerate(stream)) % (2 ** 31)
