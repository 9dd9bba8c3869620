"""Numerically stable scalar kernels over finite discrete distributions.

All quantities are returned in nats; conversion to bits happens only in the
reporting layer.  Divergences that are undefined because of an absolute
continuity violation (some ``p_i > 0`` where ``q_i == 0``) return ``math.inf``
rather than raising, so callers can distinguish "undefined" from "error".
The convention ``0 * log(0) = 0`` and ``0 * log(0/0) = 0`` is applied
everywhere.
"""

from __future__ import annotations

import math

import numpy as np

LN2 = math.log(2.0)

# Relative tolerance on sum(p) == 1; vectors inside it are silently
# renormalized, vectors outside it are rejected.
PROB_SUM_RTOL = 1e-9


def as_logits(values) -> np.ndarray:
    """Validate a logits vector: 1-D, length >= 1, every entry finite."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"logits must be 1-D, got shape {v.shape}")
    if v.size < 1:
        raise ValueError("logits must have at least one entry")
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise ValueError(
            f"logits contain non-finite value {v[bad[0]]!r} at index {bad[0]}"
        )
    return v


def as_probs(values) -> np.ndarray:
    """Validate a probability vector and renormalize within tolerance.

    Entries must be non-negative and sum to 1 within ``PROB_SUM_RTOL``
    relative tolerance; the returned vector is renormalized so it sums to 1
    at float64 precision.
    """
    p = np.asarray(values, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"probability vector must be 1-D, got shape {p.shape}")
    if p.size < 1:
        raise ValueError("probability vector must have at least one entry")
    bad = np.flatnonzero(~np.isfinite(p))
    if bad.size:
        raise ValueError(
            f"probability vector has non-finite entry at index {bad[0]}"
        )
    neg = np.flatnonzero(p < 0.0)
    if neg.size:
        raise ValueError(
            f"probability vector has negative entry {p[neg[0]]!r} at index {neg[0]}"
        )
    total = float(p.sum())
    if abs(total - 1.0) > PROB_SUM_RTOL:
        raise ValueError(
            f"probability vector sums to {total!r}, outside tolerance of 1"
        )
    return p / total


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax with max-subtraction; safe for |logits| up to 1e4."""
    if not (isinstance(temperature, (int, float)) and math.isfinite(temperature)):
        raise ValueError(f"temperature must be a finite number, got {temperature!r}")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature!r}")
    z = as_logits(logits) / float(temperature)
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def entropy(p) -> float:
    """Shannon entropy H(p) = -sum p_i log p_i in nats."""
    p = as_probs(p)
    nz = p > 0.0
    return max(0.0, float(-np.sum(p[nz] * np.log(p[nz]))))


def kl(p, q) -> float:
    """KL divergence sum p_i log(p_i / q_i); inf when support of p exceeds q."""
    p = as_probs(p)
    q = as_probs(q)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.size} vs {q.size}")
    nz = p > 0.0
    if np.any(q[nz] == 0.0):
        return math.inf
    return max(0.0, float(np.sum(p[nz] * np.log(p[nz] / q[nz]))))


def js(p, q) -> float:
    """Jensen-Shannon divergence 0.5 KL(p||m) + 0.5 KL(q||m), m = (p+q)/2.

    Always finite and within [0, log 2].  The mixture is formed once, which
    makes js(p, q) == js(q, p) bit-exact.
    """
    p = as_probs(p)
    q = as_probs(q)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.size} vs {q.size}")
    m = 0.5 * (p + q)
    return 0.5 * _kl_unchecked(p, m) + 0.5 * _kl_unchecked(q, m)


def _kl_unchecked(p: np.ndarray, q: np.ndarray) -> float:
    # Internal: operands already validated; q must dominate p.
    nz = p > 0.0
    return max(0.0, float(np.sum(p[nz] * np.log(p[nz] / q[nz]))))


def cross_entropy(p, q) -> float:
    """Cross entropy -sum p_i log q_i; inf when q misses mass where p has it."""
    p = as_probs(p)
    q = as_probs(q)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.size} vs {q.size}")
    nz = p > 0.0
    if np.any(q[nz] == 0.0):
        return math.inf
    return float(-np.sum(p[nz] * np.log(q[nz])))


def perplexity(token_logprobs) -> float:
    """exp(-mean(logprobs)) for per-token log-probabilities in nats."""
    lp = np.asarray(token_logprobs, dtype=np.float64)
    if lp.ndim != 1 or lp.size == 0:
        raise ValueError("token_logprobs must be a non-empty 1-D sequence")
    bad = np.flatnonzero(~np.isfinite(lp))
    if bad.size:
        raise ValueError(f"non-finite log-probability at index {bad[0]}")
    pos = np.flatnonzero(lp > 0.0)
    if pos.size:
        raise ValueError(
            f"log-probability {lp[pos[0]]!r} at index {pos[0]} is positive"
        )
    return float(np.exp(-lp.mean()))
