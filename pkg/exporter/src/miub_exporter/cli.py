"""Export captures from the bundled reference model.

Mirrors the consuming CLI's vocabulary: --sites, --pooling, --max-samples,
--out.  Real deployments would swap the reference model for their own
adapter-instrumented checkpoint; the bundled model keeps the tool runnable
and testable without downloads.
"""

from __future__ import annotations

import argparse
import sys

from .hooks import DEFAULT_PATTERNS, SITE_KINDS, HookPlan, export_captures
from .hooks import export_logprobs
from .refmodel import ReferenceModel, reference_dataset


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="miub-export", description=__doc__)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--sites", action="append", metavar="KIND=REGEX",
                        help="override a site pattern, e.g. attn_q=.*\\.q_proj$")
    parser.add_argument("--pooling", choices=("last_token", "mean"),
                        default="last_token")
    parser.add_argument("--max-samples", type=int, default=10)
    parser.add_argument("--seed", type=int, default=1234)
    args = parser.parse_args(argv)

    patterns = dict(DEFAULT_PATTERNS)
    for override in args.sites or []:
        kind, _, regex = override.partition("=")
        if kind not in SITE_KINDS or not regex:
            print(f"bad --sites override {override!r}; expected KIND=REGEX "
                  f"with KIND in {SITE_KINDS}", file=sys.stderr)
            return 1
        patterns[kind] = regex

    try:
        plan = HookPlan(site_patterns=patterns, pooling=args.pooling,
                        max_samples=args.max_samples)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 1

    model = ReferenceModel(seed=args.seed)
    dataset = reference_dataset(n_samples=args.max_samples)
    try:
        sites = export_captures(model, dataset, plan, args.out,
                                meta_overrides={"seed": args.seed})
        export_logprobs(model, dataset, args.out,
                        max_samples=args.max_samples)
    except (ValueError, RuntimeError) as exc:
        print(str(exc), file=sys.stderr)
        return 2
    print(f"exported {len(sites)} sites x {min(args.max_samples, len(dataset))} "
          f"samples to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
