"""Configuration for the deterministic toy LoRA transformer."""

from __future__ import annotations

from dataclasses import dataclass

LENGTH_BINS = {"short": 16, "medium": 48, "long": 96}
MAX_SEQ_LEN = max(LENGTH_BINS.values())
SHARE_CHOICES = (1, 2, 4)

DEFAULT_RANK_GRID = (2, 4, 8, 16)
DEFAULT_SHARE_GRID = (4, 2, 1)


@dataclass(frozen=True)
class ToySimConfig:
    layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    vocab: int = 64
    rank: int = 8
    share_k: int = 1
    seed: int = 0
    steps: int = 300
    lr: float = 0.1
    length_bin: str = "short"
    batch_size: int = 8
    train_samples: int = 128
    capture_samples: int = 16

    def __post_init__(self):
        if self.layers < 2 or self.layers % 2 != 0:
            raise ValueError(f"layers must be an even integer >= 2, got {self.layers}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )
        if self.share_k not in SHARE_CHOICES:
            raise ValueError(f"share_k must be one of {SHARE_CHOICES}, got {self.share_k}")
        if (self.layers // 2) % self.share_k != 0:
            raise ValueError(
                f"share_k={self.share_k} must divide layers/2={self.layers // 2}"
            )
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.length_bin not in LENGTH_BINS:
            raise ValueError(
                f"length_bin must be one of {sorted(LENGTH_BINS)}, got {self.length_bin!r}"
            )
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if min(self.batch_size, self.train_samples, self.capture_samples) < 1:
            raise ValueError("batch_size, train_samples and capture_samples must be >= 1")

    @property
    def seq_len(self) -> int:
        return LENGTH_BINS[self.length_bin]
