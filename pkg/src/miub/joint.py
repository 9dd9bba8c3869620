"""Plug-in mutual-information estimation from paired scalar coordinates.

Paired coordinates (one stream from the frozen model, one from the adapted
model) are quantized into a 2-D histogram; mutual information and its
JS-based bound are then computed directly on the empirical joint
distribution and the product of its marginals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels

RANGE_STRATEGIES = ("minmax", "percentile")


@dataclass(frozen=True)
class QuantizationSpec:
    """How paired coordinates are binned.

    ``minmax`` spans each variable's observed range; ``percentile`` spans
    the symmetric percentile interval [100-p, p], which is robust to
    hidden-state outliers (clamped to the edge bins).
    """

    bins: int = 32
    range_strategy: str = "percentile"
    percentile: float = 99.5

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")
        if self.range_strategy not in RANGE_STRATEGIES:
            raise ValueError(
                f"range_strategy must be one of {RANGE_STRATEGIES}, "
                f"got {self.range_strategy!r}"
            )
        if self.range_strategy == "percentile" and not (50.0 < self.percentile <= 100.0):
            raise ValueError(
                f"percentile must be in (50, 100], got {self.percentile}"
            )


@dataclass(frozen=True, eq=False)
class JointHistogram:
    """Quantized empirical joint distribution with its marginals.

    The marginals are derived from ``joint`` by axis sums at construction
    time, so recomputing them always reproduces the stored arrays exactly.
    """

    counts: np.ndarray
    joint: np.ndarray
    marginal_o: np.ndarray = field(init=False)
    marginal_l: np.ndarray = field(init=False)
    n_samples: int = 1

    def __post_init__(self):
        joint = np.asarray(self.joint, dtype=np.float64)
        if joint.ndim != 2:
            raise ValueError(f"joint must be 2-D, got shape {joint.shape}")
        if np.any(joint < 0) or not np.all(np.isfinite(joint)):
            raise ValueError("joint must be finite and non-negative")
        total = float(joint.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"joint sums to {total!r}, outside tolerance of 1")
        joint = joint / total
        joint.setflags(write=False)
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        counts.setflags(write=False)
        object.__setattr__(self, "joint", joint)
        object.__setattr__(self, "counts", counts)
        for name, axis in (("marginal_o", 1), ("marginal_l", 0)):
            marg = joint.sum(axis=axis)
            marg.setflags(write=False)
            object.__setattr__(self, name, marg)
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be positive, got {self.n_samples}")

    @classmethod
    def from_counts(cls, counts) -> "JointHistogram":
        c = np.asarray(counts, dtype=np.int64)
        n = int(c.sum())
        if n <= 0:
            raise ValueError("counts must contain at least one observation")
        return cls(counts=c, joint=c / float(n), n_samples=n)

    @classmethod
    def from_joint(cls, joint, n_samples: int = 1) -> "JointHistogram":
        """Wrap an explicit joint matrix (counts are left empty)."""
        j = np.asarray(joint, dtype=np.float64)
        return cls(counts=np.zeros_like(j, dtype=np.int64), joint=j,
                   n_samples=n_samples)

    def product_of_marginals(self) -> np.ndarray:
        return np.outer(self.marginal_o, self.marginal_l)


def _bin_edges(values: np.ndarray, spec: QuantizationSpec) -> tuple[float, float]:
    if spec.range_strategy == "minmax":
        return float(values.min()), float(values.max())
    hi_p = spec.percentile
    lo = float(np.percentile(values, 100.0 - hi_p))
    hi = float(np.percentile(values, hi_p))
    return lo, hi


def _bin_indices(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def quantize_pairs(o_coords, l_coords,
                   spec: QuantizationSpec | None = None) -> JointHistogram:
    """Quantize paired coordinates into a bins x bins joint histogram.

    Out-of-range values (possible under the percentile strategy) are
    clamped to the edge bins so every pair lands in exactly one cell.
    """
    spec = spec or QuantizationSpec()
    o = np.asarray(o_coords, dtype=np.float64).ravel()
    l = np.asarray(l_coords, dtype=np.float64).ravel()
    if o.size == 0 or l.size == 0:
        raise ValueError("quantize_pairs requires non-empty inputs")
    if o.size != l.size:
        raise ValueError(f"length mismatch: {o.size} vs {l.size}")
    if not (np.all(np.isfinite(o)) and np.all(np.isfinite(l))):
        raise ValueError("coordinates must be finite")
    if o.size < spec.bins:
        raise ValueError(
            f"need at least bins={spec.bins} samples, got {o.size}"
        )
    if o.size < 10 * spec.bins * spec.bins:
        warnings.warn(
            f"only {o.size} pairs for a {spec.bins}x{spec.bins} histogram; "
            "the plug-in estimate may be strongly biased",
            stacklevel=2,
        )
    o_lo, o_hi = _bin_edges(o, spec)
    l_lo, l_hi = _bin_edges(l, spec)
    oi = _bin_indices(o, o_lo, o_hi, spec.bins)
    li = _bin_indices(l, l_lo, l_hi, spec.bins)
    flat = np.bincount(oi * spec.bins + li, minlength=spec.bins * spec.bins)
    counts = flat.reshape(spec.bins, spec.bins)
    return JointHistogram.from_counts(counts)


def mutual_information(h: JointHistogram) -> float:
    """I(O;L) = KL(P_OL || P_O x P_L) over the histogram cells, in nats."""
    return kernels.kl(h.joint.ravel(), h.product_of_marginals().ravel())


def miub(h: JointHistogram) -> float:
    """log(2) * JS(P_OL || P_O x P_L): the JS-based bound reported next to MI.

    Always finite and at most (log 2)^2.  Reported side by side with
    ``mutual_information``; the ordering between the two is surfaced as a
    flag downstream, never asserted.
    """
    return kernels.LN2 * kernels.js(h.joint.ravel(),
                                    h.product_of_marginals().ravel())
