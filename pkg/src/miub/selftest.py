"""Built-in pass/fail checks over the kernel and estimator examples.

Expected values were computed with independent direct-summation oracles at
extended precision and are frozen here.  ``run_selftest`` accepts an
alternative JS implementation purely so the test suite can verify that a
perturbed kernel is actually caught (negative control).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .joint import JointHistogram, QuantizationSpec, miub, mutual_information
from .joint import quantize_pairs

REL_TOL = 1e-10


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _close(actual: float, expected: float, rtol: float = REL_TOL) -> bool:
    return math.isclose(actual, expected, rel_tol=rtol, abs_tol=rtol)


def run_selftest(js_impl=None) -> list[CheckResult]:
    js = js_impl or kernels.js
    results: list[CheckResult] = []

    def check(name: str, fn) -> None:
        try:
            with warnings.catch_warnings():
                # the reference examples are deliberately tiny
                warnings.filterwarnings("ignore", message=r"only \d+ pairs")
                fn()
            results.append(CheckResult(name, True))
        except AssertionError as exc:
            results.append(CheckResult(name, False, str(exc)))
        except Exception as exc:  # pragma: no cover - defensive
            results.append(CheckResult(name, False, f"{type(exc).__name__}: {exc}"))

    def expect(actual, expected, rtol=REL_TOL):
        assert _close(actual, expected, rtol), f"got {actual!r}, want {expected!r}"

    # --- softmax ---
    check("softmax uniform at equal logits", lambda: expect(
        float(np.max(np.abs(kernels.softmax([0.0, 0.0, 0.0]) - 1 / 3))), 0.0,
        rtol=1e-12))
    check("softmax saturates at extreme logits", lambda: expect(
        float(kernels.softmax([1000.0, 0.0])[0]), 1.0, rtol=1e-12))
    check("softmax(1,2) matches direct evaluation", lambda: expect(
        float(kernels.softmax([1.0, 2.0])[0]), 0.2689414213699951))

    # --- entropy ---
    check("entropy of a point mass is zero", lambda: expect(
        kernels.entropy([1.0, 0.0]), 0.0, rtol=1e-12))
    check("entropy of uniform binary is log 2", lambda: expect(
        kernels.entropy([0.5, 0.5]), math.log(2.0)))
    check("entropy(0.25, 0.75)", lambda: expect(
        kernels.entropy([0.25, 0.75]), 0.5623351446188084))

    # --- kl ---
    check("kl of identical distributions is zero", lambda: expect(
        kernels.kl([0.3, 0.7], [0.3, 0.7]), 0.0, rtol=1e-12))
    check("kl((.5,.5)||(.25,.75))", lambda: expect(
        kernels.kl([0.5, 0.5], [0.25, 0.75]), 0.14384103622589045))
    def kl_disjoint():
        val = kernels.kl([1.0, 0.0], [0.0, 1.0])
        assert math.isinf(val) and val > 0, f"expected +inf, got {val!r}"

    check("kl with disjoint support is infinite", kl_disjoint)

    # --- js ---
    check("js of identical distributions is zero", lambda: expect(
        js([0.4, 0.6], [0.4, 0.6]), 0.0, rtol=1e-12))
    check("js at disjoint support is log 2", lambda: expect(
        js([1.0, 0.0], [0.0, 1.0]), math.log(2.0)))
    check("js((.5,.5)||(.25,.75))", lambda: expect(
        js([0.5, 0.5], [0.25, 0.75]), 0.03382207556860523))

    def js_symmetry():
        rng = np.random.default_rng(20240117)
        for _ in range(200):
            dim = int(rng.integers(2, 9))
            p = rng.dirichlet(np.ones(dim))
            q = rng.dirichlet(np.ones(dim))
            forwards, backwards = js(p, q), js(q, p)
            assert forwards == backwards, (
                f"js symmetry violated: {forwards!r} != {backwards!r}"
            )

    check("js symmetry", js_symmetry)

    def js_bounds():
        rng = np.random.default_rng(987654321)
        top = math.log(2.0) + 1e-12
        for _ in range(200):
            dim = int(rng.integers(2, 9))
            p = rng.dirichlet(np.full(dim, 0.3))
            q = rng.dirichlet(np.full(dim, 0.3))
            val = js(p, q)
            assert 0.0 <= val <= top, f"js out of [0, log 2]: {val!r}"

    check("js bounded by [0, log 2]", js_bounds)

    # --- cross entropy ---
    check("cross entropy one-hot class 0", lambda: expect(
        kernels.cross_entropy([1.0, 0.0, 0.0], [0.7, 0.2, 0.1]),
        0.3566749439387324))
    check("cross entropy equals entropy when p == q", lambda: expect(
        kernels.cross_entropy([0.5, 0.5], [0.5, 0.5]), math.log(2.0)))
    check("cross entropy one-hot class 1 with empty class 2", lambda: expect(
        kernels.cross_entropy([0.0, 1.0, 0.0], [0.7, 0.3, 0.0]),
        1.203972804325936))

    # --- perplexity ---
    check("perplexity of uniform model is vocab size", lambda: expect(
        kernels.perplexity([math.log(1 / 50.0)] * 7, ), 50.0))
    check("perplexity of a perfect prediction is one", lambda: expect(
        kernels.perplexity([0.0]), 1.0, rtol=1e-12))
    check("perplexity(log .5, log .125) is 4", lambda: expect(
        kernels.perplexity([math.log(0.5), math.log(0.125)]), 4.0))
    check("perplexity equals exp of cross-entropy rate", lambda: expect(
        kernels.perplexity([math.log(0.2)] * 5),
        math.exp(kernels.cross_entropy([1, 0, 0, 0, 0], [0.2] * 5))))

    # --- quantization ---
    def quantize_diagonal():
        h = quantize_pairs([1, 2, 3, 4], [1, 2, 3, 4],
                           QuantizationSpec(bins=2, range_strategy="minmax"))
        assert np.allclose(h.joint, [[0.5, 0.0], [0.0, 0.5]]), h.joint

    check("identical streams quantize onto the diagonal", quantize_diagonal)

    def quantize_uniform():
        h = quantize_pairs([1, 2, 1, 2], [5, 5, 6, 6],
                           QuantizationSpec(bins=2, range_strategy="minmax"))
        assert np.allclose(h.joint, [[0.25, 0.25], [0.25, 0.25]]), h.joint

    check("hand-enumerated 2x2 assignment", quantize_uniform)

    def quantize_clamps():
        rng = np.random.default_rng(7)
        o = rng.normal(size=256)
        o[17] = 1e9
        h = quantize_pairs(o, rng.normal(size=256),
                           QuantizationSpec(bins=4, range_strategy="percentile",
                                            percentile=99.0))
        assert int(h.counts.sum()) == 256, h.counts.sum()

    check("outliers clamp to edge bins with counts conserved", quantize_clamps)

    # --- MI / bound ---
    product = JointHistogram.from_joint(np.full((2, 2), 0.25))
    diagonal = JointHistogram.from_joint([[0.5, 0.0], [0.0, 0.5]])
    tilted = JointHistogram.from_joint([[0.4, 0.1], [0.1, 0.4]])
    check("mutual information of an independent joint is zero", lambda: expect(
        mutual_information(product), 0.0, rtol=1e-12))
    check("mutual information of the diagonal joint is log 2", lambda: expect(
        mutual_information(diagonal), math.log(2.0)))
    check("mutual information of the tilted joint", lambda: expect(
        mutual_information(tilted), 0.19274475702175742))
    check("bound of an independent joint is zero", lambda: expect(
        miub(product), 0.0, rtol=1e-12))
    check("bound of the diagonal joint", lambda: expect(
        miub(diagonal), 0.1495545130631954))
    check("bound of the tilted joint", lambda: expect(
        miub(tilted), 0.035123040940338135))

    return results
